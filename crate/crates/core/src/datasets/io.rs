//! Tensor-bundle directories: `manifest.json` plus raw little-endian float32
//! tensor files, and `corrupted_ids.csv` for bundles with known corruption.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, FlowSample, Provenance, Standardizer, CHANNELS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid_graph::{Neighborhood, UrbanGraph};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORRUPTED_IDS_FILE: &str = "corrupted_ids.csv";
const ADJACENCY_FILE: &str = "adjacency.bin";
const FORMAT_VERSION: u32 = 1;
const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_version")]
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_provenance")]
    pub provenance: Provenance,
    pub interval_minutes: u32,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighborhood: Option<Neighborhood>,
    /// Dense float32 adjacency overriding the lattice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency_file: Option<String>,
    /// Stored when the bundle's standardizer was fit before corruption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

fn default_provenance() -> Provenance {
    Provenance::PublicDump
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::load(MANIFEST_FILE, format!("{}: {e}", path.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::load(MANIFEST_FILE, e.to_string()))?;
        if manifest.format_version > FORMAT_VERSION {
            return Err(Error::load(
                MANIFEST_FILE,
                format!(
                    "format version {} is newer than supported {FORMAT_VERSION}",
                    manifest.format_version
                ),
            ));
        }
        Ok(manifest)
    }

    /// Lattice graph or explicit adjacency described by the manifest.
    pub fn graph(&self, dir: &Path) -> Result<UrbanGraph> {
        match &self.adjacency_file {
            Some(file) => UrbanGraph::load_adjacency(&dir.join(file), self.height, self.width),
            None => UrbanGraph::grid(
                self.height,
                self.width,
                self.neighborhood.unwrap_or_default(),
            ),
        }
    }
}

pub(crate) fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_tensor(dir: &Path, name: &str, entry: &TensorEntry) -> Result<Tensor<f32>> {
    if entry.dtype != "float32" {
        return Err(Error::load(
            name,
            format!("dtype `{}` is not float32", entry.dtype),
        ));
    }
    let bytes = fs::read(dir.join(&entry.file))
        .map_err(|e| Error::load(name, format!("{}: {e}", entry.file)))?;
    let numel: usize = entry.shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(Error::load(
            name,
            format!(
                "file holds {} bytes but shape {:?} needs {}",
                bytes.len(),
                entry.shape,
                numel * 4
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::load(
            name,
            format!("non-finite value at flat index {pos}"),
        ));
    }
    Ok(Tensor::new(entry.shape.clone(), data))
}

/// Interprets `x` as `[S, T, M, 2]` (or `[S, T, H, W, 2]`) and `y` as
/// `[S, M, 2]` (or `[S, 1, M, 2]` / `[S, 1, H, W, 2]`).
fn split_samples(
    split: &str,
    x: Tensor<f32>,
    y: Tensor<f32>,
    m: usize,
    first_id: u64,
) -> Result<Vec<FlowSample>> {
    let xs = x.shape().to_vec();
    let x_name = format!("{split}_x");
    let y_name = format!("{split}_y");
    let (s, t) = match xs.as_slice() {
        [s, t, rest @ ..]
            if rest.iter().product::<usize>() == m * CHANNELS && rest.last() == Some(&CHANNELS) =>
        {
            (*s, *t)
        }
        _ => {
            return Err(Error::load(
                x_name,
                format!("shape {xs:?} does not match [S, T, {m}, {CHANNELS}]"),
            ))
        }
    };
    let ys = y.shape().to_vec();
    let y_ok = ys.first() == Some(&s)
        && ys.last() == Some(&CHANNELS)
        && ys[1..].iter().product::<usize>() == m * CHANNELS
        && (ys.len() == 3 || ys[1] == 1 || ys.len() == 4 && ys[1] * ys[2] == m);
    if !y_ok {
        return Err(Error::load(
            y_name,
            format!(
                "shape {ys:?} does not match [{s}, {m}, {CHANNELS}] or [{s}, 1, {m}, {CHANNELS}]"
            ),
        ));
    }
    let x_block = t * m * CHANNELS;
    let y_block = m * CHANNELS;
    let (xd, yd) = (x.into_data(), y.into_data());
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let x = xd[i * x_block..(i + 1) * x_block].to_vec();
        let y = yd[i * y_block..(i + 1) * y_block].to_vec();
        if x.iter().chain(&y).any(|&v| v < 0.0) {
            log::debug!("{split} sample {i} has negative raw flows");
        }
        out.push(FlowSample {
            id: first_id + i as u64,
            x: Tensor::new(vec![t, m, CHANNELS], x),
            y: Tensor::new(vec![m, CHANNELS], y),
            corrupted: false,
        });
    }
    Ok(out)
}

/// Loads a bundle directory using the graph described in its manifest.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest = Manifest::read(dir)?;
    let graph = manifest.graph(dir)?;
    load_bundle_with_graph(dir, graph)
}

/// Loads a bundle directory against an explicit graph.
pub fn load_bundle_with_graph(dir: &Path, graph: UrbanGraph) -> Result<DatasetBundle> {
    let manifest = Manifest::read(dir)?;
    let m = graph.num_nodes();
    if manifest.height * manifest.width != m {
        return Err(Error::load(
            MANIFEST_FILE,
            format!(
                "{}x{} regions but the graph has {m} nodes",
                manifest.height, manifest.width
            ),
        ));
    }
    let mut splits = Vec::with_capacity(3);
    let mut next_id = 0u64;
    for split in SPLITS {
        let mut pair = Vec::with_capacity(2);
        for part in ["x", "y"] {
            let name = format!("{split}_{part}");
            let entry = manifest
                .tensors
                .get(&name)
                .ok_or_else(|| Error::load(&name, "missing from manifest"))?;
            pair.push(read_tensor(dir, &name, entry)?);
        }
        let y = pair.pop().unwrap();
        let x = pair.pop().unwrap();
        let samples = split_samples(split, x, y, m, next_id)?;
        next_id += samples.len() as u64;
        splits.push(samples);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let mut train = splits.pop().unwrap();
    if train.is_empty() {
        return Err(Error::load("train_x", "training split is empty"));
    }
    let corrupted_path = dir.join(CORRUPTED_IDS_FILE);
    if corrupted_path.exists() {
        let ids: HashSet<u64> = read_corrupted_ids(&corrupted_path)?.into_iter().collect();
        for s in &mut train {
            s.corrupted = ids.contains(&s.id);
        }
    }
    let standardizer = match manifest.standardizer.clone() {
        Some(st) => Standardizer::new(st.mean, st.std)?,
        None => Standardizer::fit(&train)?,
    };
    let bundle = DatasetBundle {
        name: manifest.name.clone(),
        train,
        val,
        test,
        standardizer,
        graph,
        provenance: manifest.provenance,
        interval_minutes: manifest.interval_minutes,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` as a tensor-bundle directory, creating `dir` if needed.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    let m = bundle.num_nodes();
    let t = bundle.input_len();
    let mut tensors = BTreeMap::new();
    for (split, samples) in [
        ("train", &bundle.train),
        ("val", &bundle.val),
        ("test", &bundle.test),
    ] {
        let x: Vec<f32> = samples
            .iter()
            .flat_map(|s| s.x.data().iter().copied())
            .collect();
        let y: Vec<f32> = samples
            .iter()
            .flat_map(|s| s.y.data().iter().copied())
            .collect();
        for (part, data, shape) in [
            ("x", x, vec![samples.len(), t, m, CHANNELS]),
            ("y", y, vec![samples.len(), m, CHANNELS]),
        ] {
            let name = format!("{split}_{part}");
            let file = format!("{name}.f32");
            write_f32(&dir.join(&file), &data)?;
            tensors.insert(
                name,
                TensorEntry {
                    dtype: "float32".into(),
                    shape,
                    file,
                },
            );
        }
    }
    let adjacency_file = match bundle.graph.neighborhood() {
        Some(_) => None,
        None => {
            fs::write(dir.join(ADJACENCY_FILE), bundle.graph.adjacency_bytes())?;
            Some(ADJACENCY_FILE.to_string())
        }
    };
    let synthetic = bundle.provenance == Provenance::Synthetic;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: bundle.name.clone(),
        provenance: bundle.provenance,
        interval_minutes: bundle.interval_minutes,
        height: bundle.graph.height(),
        width: bundle.graph.width(),
        neighborhood: bundle.graph.neighborhood(),
        adjacency_file,
        standardizer: synthetic.then(|| bundle.standardizer.clone()),
        tensors,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if synthetic || bundle.train.iter().any(|s| s.corrupted) {
        let mut w = csv::Writer::from_path(dir.join(CORRUPTED_IDS_FILE))?;
        w.write_record(["sample_id", "flag"])?;
        for s in &bundle.train {
            w.write_record([s.id.to_string(), u8::from(s.corrupted).to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Ids flagged `1` in a `sample_id,flag` CSV.
pub fn read_corrupted_ids(path: &Path) -> Result<Vec<u64>> {
    #[derive(Deserialize)]
    struct Row {
        sample_id: u64,
        flag: u8,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut ids = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row?;
        if row.flag != 0 {
            ids.push(row.sample_id);
        }
    }
    Ok(ids)
}
