//! File formats: headered CSV matrices (unit per row, column-major pixel
//! order), a raw little-endian f64 tensor format for large traces, label
//! CSVs, and the checksummed run manifest.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes an n × L matrix as CSV. The header line records the image dims;
/// pixels are stored column-major within each row.
pub fn write_matrix_csv(path: &Path, data: &Array2<f64>, dims: &[usize]) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(f);
    let dims_str: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    writeln!(w, "#dims={} order=col-major", dims_str.join("x")).map_err(|e| file_err(path, e))?;
    for row in data.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| file_err(path, e))?;
    }
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<(Array2<f64>, Vec<usize>), IoError> {
    let f = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let reader = BufReader::new(f);
    let mut dims: Vec<usize> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| file_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if let Some(spec) = trimmed.strip_prefix("#dims=") {
                let token = spec.split_whitespace().next().unwrap_or("");
                dims = token
                    .split('x')
                    .map(|t| t.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format_err(path, format!("bad dims header: {trimmed}")))?;
            }
            continue;
        }
        let row: Vec<f64> = trimmed
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format_err(path, format!("bad number on line {}", lineno + 1)))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(format_err(path, format!("ragged row on line {}", lineno + 1)));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_err(path, "no data rows"));
    }
    let n = rows.len();
    let l = rows[0].len();
    if dims.is_empty() {
        dims = vec![l];
    }
    if dims.iter().product::<usize>() != l {
        return Err(format_err(
            path,
            format!("dims {:?} do not match row length {l}", dims),
        ));
    }
    let data = Array2::from_shape_fn((n, l), |(i, j)| rows[i][j]);
    Ok((data, dims))
}

const TENSOR_MAGIC: &[u8; 4] = b"FPDM";
const TENSOR_VERSION: u32 = 1;

/// Raw little-endian f64 tensor: magic, version, ndim, dims, data.
pub fn write_tensor_bin(path: &Path, shape: &[usize], data: &[f64]) -> Result<(), IoError> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let f = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(TENSOR_MAGIC).map_err(|e| file_err(path, e))?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())
        .map_err(|e| file_err(path, e))?;
    w.write_all(&(shape.len() as u32).to_le_bytes())
        .map_err(|e| file_err(path, e))?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())
            .map_err(|e| file_err(path, e))?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| file_err(path, e))?;
    }
    Ok(())
}

pub fn read_tensor_bin(path: &Path) -> Result<(Vec<usize>, Vec<f64>), IoError> {
    let f = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| file_err(path, e))?;
    if &magic != TENSOR_MAGIC {
        return Err(format_err(path, "not a tensor file"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| file_err(path, e))?;
    if u32::from_le_bytes(u32buf) != TENSOR_VERSION {
        return Err(format_err(path, "unsupported tensor version"));
    }
    r.read_exact(&mut u32buf).map_err(|e| file_err(path, e))?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut u64buf = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut u64buf).map_err(|e| file_err(path, e))?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let total: usize = shape.iter().product();
    let mut data = Vec::with_capacity(total);
    for _ in 0..total {
        r.read_exact(&mut u64buf).map_err(|e| file_err(path, e))?;
        data.push(f64::from_le_bytes(u64buf));
    }
    Ok((shape, data))
}

/// Matrix convenience wrappers over the binary tensor format.
pub fn write_matrix_bin(path: &Path, data: &Array2<f64>, dims: &[usize]) -> Result<(), IoError> {
    let mut shape = vec![data.nrows()];
    shape.extend_from_slice(dims);
    let flat: Vec<f64> = data.iter().copied().collect();
    write_tensor_bin(path, &shape, &flat)
}

pub fn read_matrix_bin(path: &Path) -> Result<(Array2<f64>, Vec<usize>), IoError> {
    let (shape, data) = read_tensor_bin(path)?;
    if shape.len() < 2 {
        return Err(format_err(path, "matrix tensor needs at least two dims"));
    }
    let n = shape[0];
    let dims = shape[1..].to_vec();
    let l: usize = dims.iter().product();
    Ok((
        Array2::from_shape_vec((n, l), data)
            .map_err(|e| format_err(path, e.to_string()))?,
        dims,
    ))
}

/// Reads a matrix by extension: `.bin` for the raw format, CSV otherwise.
pub fn read_matrix_auto(path: &Path) -> Result<(Array2<f64>, Vec<usize>), IoError> {
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        read_matrix_bin(path)
    } else {
        read_matrix_csv(path)
    }
}

/// Integer label matrix (units × columns), one unit per row.
pub fn write_labels_csv(path: &Path, labels: &Array2<usize>, header: &[&str]) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "#{}", header.join(",")).map_err(|e| file_err(path, e))?;
    for row in labels.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| file_err(path, e))?;
    }
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Array2<usize>, IoError> {
    let f = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let reader = BufReader::new(f);
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| file_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row: Vec<usize> = trimmed
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| format_err(path, format!("bad label on line {}", lineno + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_err(path, "no label rows"));
    }
    let n = rows.len();
    let c = rows[0].len();
    if rows.iter().any(|r| r.len() != c) {
        return Err(format_err(path, "ragged label rows"));
    }
    Ok(Array2::from_shape_fn((n, c), |(i, j)| rows[i][j]))
}

/// Membership trace as a 3-D integer tensor (R × n × levels) in CSV form:
/// one retained sample per line, unit-major.
pub fn write_membership_trace(path: &Path, labels: &Array3<u32>) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(f);
    let (r, n, j) = (labels.shape()[0], labels.shape()[1], labels.shape()[2]);
    writeln!(w, "#shape={r}x{n}x{j} layout=sample-rows,unit-major").map_err(|e| file_err(path, e))?;
    for s in 0..r {
        let mut line = String::new();
        for i in 0..n {
            for l in 0..j {
                if !line.is_empty() {
                    line.push(',');
                }
                line.push_str(&labels[(s, i, l)].to_string());
            }
        }
        writeln!(w, "{line}").map_err(|e| file_err(path, e))?;
    }
    Ok(())
}

pub fn read_membership_trace(path: &Path) -> Result<Array3<u32>, IoError> {
    let f = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let reader = BufReader::new(f);
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut values: Vec<u32> = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| file_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(spec) = trimmed.strip_prefix("#shape=") {
            let token = spec.split_whitespace().next().unwrap_or("");
            let parts: Vec<usize> = token
                .split('x')
                .map(|t| t.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| format_err(path, "bad shape header"))?;
            if parts.len() != 3 {
                return Err(format_err(path, "shape header must have three dims"));
            }
            shape = Some((parts[0], parts[1], parts[2]));
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        for t in trimmed.split(',') {
            values.push(
                t.trim()
                    .parse::<u32>()
                    .map_err(|_| format_err(path, "bad membership value"))?,
            );
        }
    }
    let (r, n, j) = shape.ok_or_else(|| format_err(path, "missing shape header"))?;
    if values.len() != r * n * j {
        return Err(format_err(
            path,
            format!("expected {} values, found {}", r * n * j, values.len()),
        ));
    }
    Ok(Array3::from_shape_vec((r, n, j), values)
        .map_err(|e| format_err(path, e.to_string()))?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

/// Run manifest: config echo, seeds, versions, wall times, and the emitted
/// file inventory with checksums.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_echo: String,
    pub seeds: Vec<u64>,
    pub versions: std::collections::BTreeMap<String, String>,
    /// Wall time per phase, seconds. Non-deterministic by nature.
    pub wall_times_s: std::collections::BTreeMap<String, f64>,
    pub files: Vec<ManifestFile>,
}

impl RunManifest {
    pub fn new(command: &str, config_echo: String, seeds: Vec<u64>) -> RunManifest {
        let mut versions = std::collections::BTreeMap::new();
        versions.insert("fpdpm".to_string(), env!("CARGO_PKG_VERSION").to_string());
        RunManifest {
            command: command.to_string(),
            config_echo,
            seeds,
            versions,
            wall_times_s: std::collections::BTreeMap::new(),
            files: Vec::new(),
        }
    }

    /// Records a file (path relative to the manifest's directory).
    pub fn add_file(&mut self, dir: &Path, rel: &str) -> Result<(), IoError> {
        let sha = sha256_file(&dir.join(rel))?;
        self.files.push(ManifestFile {
            path: rel.to_string(),
            sha256: sha,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| format_err(path, e.to_string()))?;
        fs::write(path, json).map_err(|e| file_err(path, e))
    }

    pub fn read(path: &Path) -> Result<RunManifest, IoError> {
        let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
    }

    /// Recomputes every checksum; errors on the first mismatch.
    pub fn verify(&self, dir: &Path) -> Result<(), IoError> {
        for f in &self.files {
            let actual = sha256_file(&dir.join(&f.path))?;
            if actual != f.sha256 {
                return Err(format_err(
                    &dir.join(&f.path),
                    format!("checksum mismatch: manifest {}, actual {}", f.sha256, actual),
                ));
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
