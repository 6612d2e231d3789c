//! Dataset loading: the synthetic desk benchmark, CIFAR-100 binaries and a
//! generic CSV format.

use std::path::{Path, PathBuf};

use classil_core::protocol::{ClassId, Dataset};

use crate::config::{resolve_data_path, DatasetConfig};
use crate::error::{HarnessError, Result};

/// Per-channel normalization of CIFAR-100 pixels scaled to `[0, 1]`.
pub const CIFAR100_MEAN: [f64; 3] = [0.5071, 0.4866, 0.4409];
pub const CIFAR100_STD: [f64; 3] = [0.2673, 0.2564, 0.2762];

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORD: usize = 2 + CIFAR_PIXELS;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load(config: &DatasetConfig) -> Result<LoadedData> {
    match config {
        DatasetConfig::Desk(spec) => {
            let (train, test) = spec
                .generate()
                .map_err(|e| HarnessError::Config(format!("dataset: {e}")))?;
            Ok(LoadedData { train, test })
        }
        DatasetConfig::Cifar100 { path, coarse_labels } => {
            let dir = match path {
                Some(p) => resolve_data_path(p),
                None => resolve_data_path(Path::new("cifar-100-binary")),
            };
            let read = |name: &str| -> Result<Dataset> {
                let file = dir.join(name);
                let bytes = std::fs::read(&file).map_err(|e| HarnessError::io(&file, e))?;
                parse_cifar100(&bytes, *coarse_labels).map_err(|m| HarnessError::format(&file, m))
            };
            Ok(LoadedData {
                train: read("train.bin")?,
                test: read("test.bin")?,
            })
        }
        DatasetConfig::Csv {
            train,
            test,
            sample_shape,
            num_classes,
            coarse_labels,
        } => {
            let read = |p: &PathBuf| -> Result<Dataset> {
                let file = resolve_data_path(p);
                let text = std::fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
                parse_csv(&text, sample_shape, *num_classes, *coarse_labels).map_err(|m| HarnessError::format(&file, m))
            };
            Ok(LoadedData {
                train: read(train)?,
                test: read(test)?,
            })
        }
    }
}

/// Parses the CIFAR-100 binary layout: per image one coarse-label byte, one
/// fine-label byte and 3072 channel-major pixel bytes. Pixels are scaled to
/// `[0, 1]` and normalized per channel.
pub fn parse_cifar100(bytes: &[u8], coarse_labels: bool) -> Result<Dataset, String> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut inputs = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut fine = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        coarse.push(record[0] as ClassId);
        fine.push(record[1] as ClassId);
        for (c, plane) in record[2..].chunks_exact(CIFAR_SIDE * CIFAR_SIDE).enumerate() {
            inputs.extend(
                plane
                    .iter()
                    .map(|&b| (b as f64 / 255.0 - CIFAR100_MEAN[c]) / CIFAR100_STD[c]),
            );
        }
    }
    Dataset::new(
        vec![3, CIFAR_SIDE, CIFAR_SIDE],
        inputs,
        fine,
        coarse_labels.then_some(coarse),
        100,
    )
    .map_err(|e| e.to_string())
}

/// Parses rows `fine[,coarse],v0,v1,...`; a first row whose leading field
/// is not an integer is treated as a header.
pub fn parse_csv(text: &str, sample_shape: &[usize], num_classes: usize, coarse_labels: bool) -> Result<Dataset, String> {
    let width: usize = sample_shape.iter().product();
    let label_cols = if coarse_labels { 2 } else { 1 };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut inputs = Vec::new();
    let mut fine = Vec::new();
    let mut coarse = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let label = |i: usize| record[i].parse::<ClassId>();
        if line == 0 && label(0).is_err() {
            continue;
        }
        if record.len() != label_cols + width {
            return Err(format!(
                "row {}: expected {} fields, found {}",
                line + 1,
                label_cols + width,
                record.len()
            ));
        }
        fine.push(label(0).map_err(|e| format!("row {}: fine label: {e}", line + 1))?);
        if coarse_labels {
            coarse.push(label(1).map_err(|e| format!("row {}: coarse label: {e}", line + 1))?);
        }
        for field in record.iter().skip(label_cols) {
            inputs.push(field.parse::<f64>().map_err(|e| format!("row {}: value `{field}`: {e}", line + 1))?);
        }
    }
    if fine.is_empty() {
        return Err("no samples".into());
    }
    Dataset::new(
        sample_shape.to_vec(),
        inputs,
        fine,
        coarse_labels.then_some(coarse),
        num_classes,
    )
    .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 4;
        bytes[1] = 30;
        bytes[2] = 255;
        bytes[CIFAR_RECORD] = 1;
        bytes[CIFAR_RECORD + 1] = 99;
        let ds = parse_cifar100(&bytes, true).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), &[3, 32, 32]);
        assert_eq!(ds.fine(0), 30);
        assert_eq!(ds.superclass_map().unwrap()[99], 1);
        let x = ds.input(0);
        assert!((x[0] - (1.0 - 0.5071) / 0.2673).abs() < 1e-12);
        assert!((x[1024] - (0.0 - 0.4866) / 0.2564).abs() < 1e-12);
        assert!(parse_cifar100(&bytes[..100], true).is_err());
    }

    #[test]
    fn csv_with_and_without_header() {
        let text = "fine,coarse,a,b\n0,0,1.5,2\n1,0,-1,0.25\n";
        let ds = parse_csv(text, &[2], 2, true).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input(1), &[-1.0, 0.25]);
        let ds = parse_csv("1,3,4\n0,5,6\n", &[2], 2, false).unwrap();
        assert_eq!(ds.fine(0), 1);
        assert!(!ds.has_coarse());
        let err = parse_csv("0,1\n", &[2], 2, false).unwrap_err();
        assert!(err.contains("expected 3 fields"), "{err}");
        assert!(parse_csv("5,1,1\n", &[2], 2, false).is_err());
    }
}
