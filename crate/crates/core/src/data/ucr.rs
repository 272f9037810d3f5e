use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::kernels::stable_mean;
use crate::tensor::Tensor;

const ZNORM_EPS: f64 = 1e-8;

/// Loads a UCR-style text file and z-normalizes every series.
pub fn load_ucr_tsv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut ds = load_ucr_tsv_raw(path)?;
    for s in &mut ds.samples {
        znormalize(&mut s.series);
    }
    Ok(ds)
}

/// Loads a UCR-style text file without normalization.
pub fn load_ucr_tsv_raw(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_ucr(&text, &name).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        },
        other => other,
    })
}

/// Parses UCR text: one sample per line, integer label first. Fields are
/// split on tabs if the line has any, else on commas, else on whitespace.
/// Labels are remapped to `0..k` in ascending order of the original value.
pub fn parse_ucr(text: &str, name: &str) -> Result<Dataset> {
    let mut rows: Vec<(i64, Vec<f64>)> = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let err = |msg: String| Error::Parse {
            path: name.into(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').map(str::trim).collect()
        } else if line.contains(',') {
            line.split(',').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        let label: f64 = fields[0].parse().map_err(|_| err(format!("bad label {:?}", fields[0])))?;
        if label.fract() != 0.0 || !label.is_finite() {
            return Err(err(format!("label {label} is not an integer")));
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad value {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(err("no values after the label".into()));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(err(format!("expected {w} values, found {}", values.len())));
            }
            _ => {}
        }
        rows.push((label as i64, values));
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{name}: no samples")));
    }
    let remap: BTreeMap<i64, usize> = rows
        .iter()
        .map(|r| r.0)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    let samples = rows
        .into_iter()
        .map(|(label, values)| {
            let l = values.len();
            Ok(Sample {
                series: Tensor::new(vec![1, l], values)?,
                label: remap[&label],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: name.to_string(),
        dataset_id: 0,
        split: Split::Train,
        samples,
    })
}

/// Writes a univariate dataset as tab-separated UCR text. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_ucr(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in &ds.samples {
        if s.series.shape()[0] != 1 {
            return Err(Error::Input(format!(
                "UCR text holds univariate series; {} has {} channels",
                ds.name,
                s.series.shape()[0]
            )));
        }
        write!(out, "{}", s.label).expect("string write");
        for v in s.series.data() {
            write!(out, "\t{v:?}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-channel zero mean, unit (population) standard deviation. Constant
/// channels become all zeros.
pub fn znormalize(series: &mut Tensor) {
    let l = series.shape()[1];
    for ch in series.data_mut().chunks_mut(l) {
        let mu = stable_mean(ch.iter().copied(), l);
        let var = ch.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / l as f64;
        let sd = var.sqrt().max(ZNORM_EPS);
        ch.iter_mut().for_each(|x| *x = (*x - mu) / sd);
    }
}
