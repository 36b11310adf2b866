//! CSV and JSON writers. Every file goes through a temporary sibling and a
//! rename, so readers never see a partial file.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use tempfile::NamedTempFile;

use underact::controller::Mode;
use underact::gp::GpStack;
use underact::learnloop::IterationResult;

use crate::error::{CliError, Result};

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// A CSV table with a leading `# schema:` comment line.
pub struct Table {
    kind: &'static str,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(kind: &'static str, header: Vec<String>) -> Self {
        Table {
            kind,
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!(
            "# schema: underact-{} v{} columns={}\n",
            self.kind,
            CSV_SCHEMA_VERSION,
            self.header.join("|")
        )
        .into_bytes();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        out.extend(w.into_inner().map_err(|e| CliError::io("<csv buffer>", e.into_error()))?);
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn nums(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| x.to_string())
}

fn opt_nums(v: &Option<DVector<f64>>, n: usize) -> Vec<String> {
    match v {
        Some(v) => nums(v).collect(),
        None => vec![String::new(); n],
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Tracking => "tracking",
        Mode::Balancing => "balancing",
    }
}

/// Executed motion with the reference alongside; reference columns are
/// empty past the horizon.
pub fn trajectory_table(r: &IterationResult) -> Table {
    let n = r.reference.q[0].len();
    let m = r.reference.u[0].len();
    let mut header: Vec<String> = vec!["k".into(), "t".into(), "mode".into()];
    header.extend(names("q", n));
    header.extend(names("qd", n));
    header.extend(names("q_ref", n));
    header.extend(names("e", n));
    header.extend(names("u", m));
    header.extend(names("tau", m));
    header.extend(names("eps_a", m));
    let mut t = Table::new("trajectory", header);
    for rec in &r.log {
        let mut row = vec![rec.k.to_string(), rec.t.to_string(), mode_name(rec.mode).into()];
        row.extend(nums(&rec.q));
        row.extend(nums(&rec.qdot));
        match r.reference.q.get(rec.k) {
            Some(qr) => {
                row.extend(nums(qr));
                row.extend(nums(&(qr - &rec.q)));
            }
            None => row.extend(vec![String::new(); 2 * n]),
        }
        row.extend(opt_nums(&rec.u, m));
        row.extend(opt_nums(&rec.tau, m));
        row.extend(opt_nums(&rec.eps_a, m));
        t.push(row);
    }
    t
}

pub fn reference_table(r: &IterationResult) -> Table {
    let rf = &r.reference;
    let n = rf.q[0].len();
    let m = rf.u[0].len();
    let mut header: Vec<String> = vec!["k".into(), "t".into()];
    header.extend(names("q", n));
    header.extend(names("qd", n));
    header.extend(names("u", m));
    let mut t = Table::new("reference", header);
    for k in 0..rf.q.len() {
        let mut row = vec![k.to_string(), (k as f64 * rf.ts).to_string()];
        row.extend(nums(&rf.q[k]));
        row.extend(nums(&rf.qdot[k]));
        match rf.u.get(k) {
            Some(u) => row.extend(nums(u)),
            None => row.extend(vec![String::new(); m]),
        }
        t.push(row);
    }
    t
}

/// Training inputs and targets of a regressor stack.
pub fn dataset_table(gp: &GpStack) -> Table {
    let mut header = names("x", gp.dim());
    header.extend(names("y", gp.outputs()));
    let mut t = Table::new("dataset", header);
    for (x, y) in gp.inputs().iter().zip(gp.targets()) {
        let mut row: Vec<String> = nums(x).collect();
        row.extend(nums(&y));
        t.push(row);
    }
    t
}

/// Joint positions, reference and tracking error for plotting, one block
/// per labelled run.
pub fn figure_table(label: &str, runs: &[(String, &IterationResult)]) -> Table {
    let n = runs
        .first()
        .map(|(_, r)| r.reference.q[0].len())
        .unwrap_or(0);
    let mut header: Vec<String> = vec![label.into(), "t".into(), "mode".into()];
    header.extend(names("q", n));
    header.extend(names("q_ref", n));
    header.extend(names("e", n));
    let mut t = Table::new("figure", header);
    for (tag, r) in runs {
        for rec in &r.log {
            let mut row = vec![tag.clone(), rec.t.to_string(), mode_name(rec.mode).into()];
            row.extend(nums(&rec.q));
            match r.reference.q.get(rec.k) {
                Some(qr) => {
                    row.extend(nums(qr));
                    row.extend(nums(&(qr - &rec.q)));
                }
                None => row.extend(vec![String::new(); 2 * n]),
            }
            t.push(row);
        }
    }
    t
}
