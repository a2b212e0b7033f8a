//! One-shot conversion of the published prewindowed research dumps
//! (`train.npz`, `val.npz`, `test.npz`, each holding arrays `x` and `y`)
//! into the tensor-bundle directory format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Seek};
use std::path::Path;

use npyz::npz::NpzArchive;
use npyz::{NpyFile, Order};

use super::io::{write_f32, MANIFEST_FILE};
use super::{Manifest, Provenance, TensorEntry, CHANNELS};
use crate::error::{Error, Result};

/// Grid geometry and sampling interval of a known dump.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DumpLayout {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub interval_minutes: u32,
}

/// `(name, H, W, interval in minutes)` of the public urban-flow dumps.
pub const KNOWN_DUMPS: [(&str, usize, usize, u32); 4] = [
    ("NYCBike1", 16, 8, 60),
    ("NYCBike2", 10, 20, 30),
    ("NYCTaxi", 10, 20, 30),
    ("BJTaxi", 32, 32, 30),
];

impl DumpLayout {
    pub fn known(name: &str) -> Option<Self> {
        KNOWN_DUMPS
            .iter()
            .find(|(n, ..)| n.eq_ignore_ascii_case(name))
            .map(|&(n, h, w, i)| Self {
                name: n.to_string(),
                height: h,
                width: w,
                interval_minutes: i,
            })
    }

    /// Matches the final path component of a dump directory against the known names.
    pub fn detect(dir: &Path) -> Option<Self> {
        dir.file_name()
            .and_then(|n| n.to_str())
            .and_then(Self::known)
    }
}

fn read_array<R: Read + Seek>(
    archive: &mut NpzArchive<R>,
    split: &str,
    key: &str,
) -> Result<(Vec<u64>, Vec<f32>)> {
    let name = format!("{split}_{key}");
    let file = archive
        .by_name(key)
        .map_err(|e| Error::load(&name, e.to_string()))?
        .ok_or_else(|| Error::load(&name, format!("array `{key}` missing from {split}.npz")))?;
    decode(file, &name)
}

fn decode<R: Read>(file: NpyFile<R>, name: &str) -> Result<(Vec<u64>, Vec<f32>)> {
    if file.order() != Order::C {
        return Err(Error::load(
            name,
            "Fortran-ordered arrays are not supported",
        ));
    }
    let shape = file.shape().to_vec();
    let data = match file.try_data::<f32>() {
        Ok(reader) => reader.collect::<std::io::Result<Vec<f32>>>(),
        Err(file) => match file.try_data::<f64>() {
            Ok(reader) => reader.map(|v| v.map(|x| x as f32)).collect(),
            Err(file) => {
                return Err(Error::load(
                    name,
                    format!("unsupported dtype {:?}", file.dtype()),
                ))
            }
        },
    }
    .map_err(|e| Error::load(name, e.to_string()))?;
    Ok((shape, data))
}

/// Converts `src/{train,val,test}.npz` into a bundle directory at `out`.
///
/// Inputs of shape `[S, T, H, W, 2]` are flattened to `[S, T, M, 2]`; targets
/// keep their shipped shape and are squeezed at load time. Nothing is written
/// unless every array validates.
pub fn convert_dump(src: &Path, layout: &DumpLayout, out: &Path) -> Result<Manifest> {
    let m = layout.height * layout.width;
    let mut arrays = Vec::new();
    for split in ["train", "val", "test"] {
        let path = src.join(format!("{split}.npz"));
        let mut archive = NpzArchive::open(&path)
            .map_err(|e| Error::load(format!("{split}_x"), format!("{}: {e}", path.display())))?;
        for key in ["x", "y"] {
            let name = format!("{split}_{key}");
            let (shape, data) = read_array(&mut archive, split, key)?;
            let shape: Vec<usize> = shape.iter().map(|&d| d as usize).collect();
            let per_sample: usize = shape.iter().skip(1).product();
            let steps_ok = match key {
                "x" => shape.len() >= 3,
                _ => shape.len() >= 2,
            };
            if !steps_ok || shape.last() != Some(&CHANNELS) || !per_sample.is_multiple_of(m * CHANNELS) {
                return Err(Error::load(
                    &name,
                    format!(
                        "shape {shape:?} incompatible with {}x{} regions",
                        layout.height, layout.width
                    ),
                ));
            }
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::load(
                    &name,
                    format!("non-finite value at flat index {pos}"),
                ));
            }
            let shape = match key {
                "x" => vec![shape[0], per_sample / (m * CHANNELS), m, CHANNELS],
                _ if per_sample == m * CHANNELS => vec![shape[0], m, CHANNELS],
                _ => {
                    return Err(Error::load(
                        &name,
                        format!("targets of shape {shape:?} are not single-step"),
                    ));
                }
            };
            arrays.push((name, shape, data));
        }
    }

    fs::create_dir_all(out)?;
    let mut tensors = BTreeMap::new();
    for (name, shape, data) in arrays {
        let file = format!("{name}.f32");
        write_f32(&out.join(&file), &data)?;
        tensors.insert(
            name,
            TensorEntry {
                dtype: "float32".into(),
                shape,
                file,
            },
        );
    }
    let manifest = Manifest {
        format_version: 1,
        name: layout.name.clone(),
        provenance: Provenance::PublicDump,
        interval_minutes: layout.interval_minutes,
        height: layout.height,
        width: layout.width,
        neighborhood: None,
        adjacency_file: None,
        standardizer: None,
        tensors,
    };
    fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
