//! File plumbing: atomic writes, content digests, the tab-separated
//! shadow dataset format, checkpoint files, and the CSV exports.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use shadowcat_core::analysis::LatentPoint;
use shadowcat_core::eval::PhasePoint;
use shadowcat_core::qsim::DensityMatrix;
use shadowcat_core::shadows::{Shadow, ShadowBatch};
use shadowcat_core::train::{Checkpoint, StepMetrics};

use crate::error::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Write via a sibling temp file and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

/// One shadow per line: basis tokens, a tab, outcome tokens.
pub fn write_dataset(path: &Path, shadows: &[Shadow]) -> Result<(), CliError> {
    let mut out = String::new();
    for s in shadows {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<ShadowBatch, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut batch = ShadowBatch::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let shadow = Shadow::parse_line(line, i + 1).map_err(CliError::runtime)?;
        batch.push(shadow).map_err(CliError::runtime)?;
    }
    Ok(batch)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes).map_err(CliError::runtime)
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from("step,total,nll,kl\n");
    for m in metrics {
        writeln!(out, "{},{},{},{}", m.step, m.total, m.nll, m.kl).unwrap();
    }
    out
}

pub const PHASE_HEADER: &str =
    "beta,N,seed,M,F,S_bits,clamp_mass,cat_task_acc,xtest_acc\n";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn phase_csv(points: &[PhasePoint]) -> String {
    let mut out = String::from(PHASE_HEADER);
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.beta,
            p.num_qubits,
            p.seed,
            p.shadow_count,
            p.fidelity,
            p.entropy_bits,
            p.clamp_mass,
            opt(p.cat_task_acc),
            opt(p.xtest_acc)
        )
        .unwrap();
    }
    out
}

pub fn latents_csv(points: &[LatentPoint]) -> String {
    let mut out = String::from("x,z_mask,n_y_mod4");
    if let Some(first) = points.first() {
        for i in 0..first.vector.len() {
            write!(out, ",c{i}").unwrap();
        }
    }
    out.push('\n');
    for p in points {
        write!(out, "{},{}", p.x.to_string(), p.z_mask).unwrap();
        match p.n_y_mod4 {
            Some(m) => write!(out, ",{m}").unwrap(),
            None => out.push(','),
        }
        for v in &p.vector {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn embedding_csv(points: &[LatentPoint], coords: &[[f64; 2]]) -> String {
    let mut out = String::from("x,dim1,dim2\n");
    for (p, c) in points.iter().zip(coords) {
        writeln!(out, "{},{},{}", p.x.to_string(), c[0], c[1]).unwrap();
    }
    out
}

pub fn rho_csv(rho: &DensityMatrix) -> String {
    let mut out = String::from("row,col,re,im\n");
    let dim = rho.dim();
    for r in 0..dim {
        for c in 0..dim {
            let v = rho.get(r, c);
            writeln!(out, "{r},{c},{},{}", v.re, v.im).unwrap();
        }
    }
    out
}
