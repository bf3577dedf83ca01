//! Flat CSV: one sample per row, `label,p0,p1,...` in row-major `(c, h, w)`
//! order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn load_csv(path: &Path, image_shape: [usize; 3]) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let width: usize = image_shape.iter().product();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        // 1-based, as in an editor
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != width + 1 {
            return Err(Error::Parse {
                row,
                detail: format!("expected {} columns, found {}", width + 1, cols.len()),
            });
        }
        let label = cols[0].parse::<usize>().map_err(|e| Error::Parse {
            row,
            detail: format!("label {:?}: {e}", cols[0]),
        })?;
        labels.push(label);
        for c in &cols[1..] {
            let v = c.parse::<f64>().map_err(|e| Error::Parse {
                row,
                detail: format!("pixel {c:?}: {e}"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse {
                    row,
                    detail: format!("pixel {v} outside [0, 1]"),
                });
            }
            pixels.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let [c, h, w] = image_shape;
    let n = labels.len();
    let images = Tensor::new(&[n, c, h, w], pixels)?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(name, Split::Train, images, labels, classes)
}

/// Writes `ds` so that [`load_csv`] reproduces it exactly.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..ds.len() {
        write!(out, "{}", ds.labels[i]).expect("string write");
        for v in ds.images.row(i) {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
