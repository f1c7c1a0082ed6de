//! Conversion of the public PEMS distribution into the dataset directory format.
//!
//! The source directory holds a `.npz` archive with a `[T, N, C]` array and,
//! optionally, a distance CSV (`from,to,distance`) and a `.txt` list of
//! sensor ids used when the CSV refers to raw ids instead of indices.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use stfit::graph_data::save_dataset;
use stfit::SpatialTemporalGraph;

/// A decoded `.npy` array, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| anyhow!("npy header lacks {key:?}: {header}"))?;
    Ok(header[at + pat.len()..].trim_start())
}

/// Parse one `.npy` file (format versions 1 to 3, C order, little-endian
/// or single-byte numeric types).
pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        bail!("not an npy file");
    }
    let major = bytes[6];
    let (len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                bail!("truncated npy header");
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => bail!("unsupported npy version {v}"),
    };
    let header = std::str::from_utf8(bytes.get(start..start + len).ok_or_else(|| anyhow!("truncated npy header"))?)?;
    let descr = header_value(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|d| d.split('\'').next())
        .ok_or_else(|| anyhow!("malformed descr in {header}"))?;
    if header_value(header, "fortran_order")?.starts_with("True") {
        bail!("Fortran-ordered arrays are not supported");
    }
    let shape_txt = header_value(header, "shape")?;
    let shape_txt = shape_txt
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| anyhow!("malformed shape in {header}"))?;
    let shape = shape_txt
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().with_context(|| format!("bad dimension {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    let body = &bytes[start + len..];

    fn decode<const W: usize>(body: &[u8], count: usize, f: impl Fn([u8; W]) -> f64) -> Result<Vec<f64>> {
        if body.len() < count * W {
            bail!("npy body holds {} bytes, expected {}", body.len(), count * W);
        }
        Ok(body[..count * W]
            .chunks_exact(W)
            .map(|c| f(c.try_into().expect("chunk width")))
            .collect())
    }
    let data = match descr {
        "<f8" => decode::<8>(body, count, f64::from_le_bytes)?,
        "<f4" => decode::<4>(body, count, |b| f32::from_le_bytes(b) as f64)?,
        "<i8" => decode::<8>(body, count, |b| i64::from_le_bytes(b) as f64)?,
        "<i4" => decode::<4>(body, count, |b| i32::from_le_bytes(b) as f64)?,
        "<i2" => decode::<2>(body, count, |b| i16::from_le_bytes(b) as f64)?,
        "|u1" => decode::<1>(body, count, |b| b[0] as f64)?,
        other => bail!("unsupported npy dtype {other}"),
    };
    Ok(NpyArray { shape, data })
}

/// Read the array named `data` (or the only array) from an `.npz` archive.
pub fn read_npz(path: &Path) -> Result<NpyArray> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut archive = zip::ZipArchive::new(file).with_context(|| format!("{} is not an npz archive", path.display()))?;
    let names: Vec<String> = archive.file_names().map(String::from).collect();
    let name = names
        .iter()
        .find(|n| n.as_str() == "data.npy")
        .or_else(|| (names.len() == 1).then(|| &names[0]))
        .ok_or_else(|| anyhow!("{} has no data.npy entry (found {names:?})", path.display()))?
        .clone();
    let mut buf = Vec::new();
    archive.by_name(&name)?.read_to_end(&mut buf)?;
    parse_npy(&buf).with_context(|| format!("{}:{name}", path.display()))
}

/// How distances become edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeights {
    /// `exp(-(d / σ)²)` with σ the standard deviation of all distances.
    #[default]
    Gaussian,
    /// Raw distance values.
    Distance,
    /// 1 for every listed edge.
    Binary,
}

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub channels: Vec<usize>,
    pub weights: EdgeWeights,
    pub step_minutes: u32,
    pub name: Option<String>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            channels: vec![0],
            weights: EdgeWeights::Gaussian,
            step_minutes: 5,
            name: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertSummary {
    pub name: String,
    pub nodes: usize,
    pub steps: usize,
    pub channels: usize,
    pub edges: Option<usize>,
}

fn first_with_extension(dir: &Path, ext: &str) -> Result<Option<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    found.sort();
    Ok(found.into_iter().next())
}

/// Read a distance CSV with a header row and at least three columns.
pub fn read_distances(path: &Path, id_map: Option<&HashMap<String, usize>>, n: usize) -> Result<Vec<(usize, usize, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut edges = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), line + 2))?;
        if rec.len() < 3 {
            bail!("{}: row {} has {} columns, expected 3", path.display(), line + 2, rec.len());
        }
        let node = |s: &str| -> Result<usize> {
            let idx = match id_map {
                Some(m) => *m
                    .get(s)
                    .ok_or_else(|| anyhow!("{}: sensor id {s} not in the id list", path.display()))?,
                None => s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.fract() == 0.0 && *v >= 0.0)
                    .ok_or_else(|| anyhow!("{}: bad node id {s:?}", path.display()))? as usize,
            };
            if idx >= n {
                bail!("{}: node {idx} out of range for {n} nodes", path.display());
            }
            Ok(idx)
        };
        let d: f64 = rec[2]
            .parse()
            .with_context(|| format!("{}: bad distance {:?}", path.display(), &rec[2]))?;
        edges.push((node(&rec[0])?, node(&rec[1])?, d));
    }
    Ok(edges)
}

/// Turn edge distances into a symmetric weight matrix (max over directions).
pub fn weight_matrix(edges: &[(usize, usize, f64)], n: usize, weights: EdgeWeights) -> Array2<f64> {
    let ds: Vec<f64> = edges.iter().map(|e| e.2).collect();
    let mean = ds.iter().sum::<f64>() / ds.len().max(1) as f64;
    let sigma = (ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / ds.len().max(1) as f64).sqrt();
    let mut a = Array2::<f64>::zeros((n, n));
    for &(i, j, d) in edges {
        if i == j {
            continue;
        }
        let w = match weights {
            EdgeWeights::Gaussian if sigma > 0.0 => (-(d / sigma).powi(2)).exp(),
            EdgeWeights::Gaussian | EdgeWeights::Binary => 1.0,
            EdgeWeights::Distance => d,
        };
        let w = w.max(a[[i, j]]);
        a[[i, j]] = w;
        a[[j, i]] = w;
    }
    a
}

/// Convert `source` into a dataset directory at `dest`.
pub fn convert(source: &Path, dest: &Path, opts: &ConvertOptions) -> Result<ConvertSummary> {
    let npz = first_with_extension(source, "npz")?
        .ok_or_else(|| anyhow!("no .npz archive in {}", source.display()))?;
    let arr = read_npz(&npz)?;
    let (t, n, c_src) = match arr.shape[..] {
        [t, n, c] => (t, n, c),
        [t, n] => (t, n, 1),
        _ => bail!("expected a [T, N, C] array, found shape {:?}", arr.shape),
    };
    if let Some(&bad) = opts.channels.iter().find(|&&c| c >= c_src) {
        bail!("channel {bad} requested but the archive has {c_src}");
    }
    if opts.channels.is_empty() {
        bail!("at least one channel must be selected");
    }
    let full = Array3::from_shape_vec((t, n, c_src), arr.data)?;
    let features = full.select(Axis(2), &opts.channels);
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        bail!("non-finite value at flat index {i} of {}", npz.display());
    }

    let id_map = match first_with_extension(source, "txt")? {
        Some(p) => {
            let text = fs::read_to_string(&p)?;
            let ids: HashMap<String, usize> = text
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect();
            Some(ids)
        }
        None => None,
    };
    let (adjacency, raw_edges) = match first_with_extension(source, "csv")? {
        Some(p) => {
            let edges = read_distances(&p, id_map.as_ref(), n)?;
            (Some(weight_matrix(&edges, n, opts.weights)), edges.len())
        }
        None => {
            log::warn!(
                "no distance CSV in {}; writing the dataset without adjacency",
                source.display()
            );
            (None, 0)
        }
    };
    let name = opts.name.clone().unwrap_or_else(|| {
        source
            .file_name()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_else(|| "dataset".into())
    });
    let graph = SpatialTemporalGraph {
        name: name.clone(),
        num_nodes: n,
        adjacency,
        features,
        step_minutes: opts.step_minutes,
        raw_edges,
    };
    save_dataset(&graph, dest)?;
    Ok(ConvertSummary {
        name,
        nodes: n,
        steps: t,
        channels: opts.channels.len(),
        edges: graph.adjacency.is_some().then_some(raw_edges),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn npy_bytes(shape: &[usize], data: &[f64]) -> Vec<u8> {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let shape_txt = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
        let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_txt}, }}");
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut out = b"\x93NUMPY\x01\x00".to_vec();
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn npy_round_trip() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        let arr = parse_npy(&npy_bytes(&[2, 3, 4], &data)).unwrap();
        assert_eq!(arr.shape, vec![2, 3, 4]);
        assert_eq!(arr.data, data);
        assert!(parse_npy(b"garbage!!!!!").is_err());
    }

    #[test]
    fn gaussian_weights_are_symmetric_and_decreasing() {
        let a = weight_matrix(&[(0, 1, 1.0), (1, 2, 3.0), (2, 1, 2.0)], 3, EdgeWeights::Gaussian);
        assert_eq!(a, a.t());
        assert!(a[[0, 1]] > a[[1, 2]]);
        assert_eq!(a[[0, 2]], 0.0);
        let b = weight_matrix(&[(0, 1, 7.0)], 2, EdgeWeights::Distance);
        assert_eq!(b[[1, 0]], 7.0);
    }
}
