//! On-disk layout: `<root>/<role>/<container_id>/<index>.ppm` plus
//! `<root>/manifest.csv`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, ImageSample, Role, SampleMeta, Transparency, CHANNELS, IMAGE_SIZE, SOURCE_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: [&str; 7] = [
    "filename",
    "fill_class",
    "container_id",
    "shape_family",
    "transparency",
    "occluded",
    "background_id",
];
const MANIFEST: &str = "manifest.csv";

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let dims = image.dims();
    let mut out = format!("P6\n{} {}\n255\n", dims[1], dims[0]).into_bytes();
    out.extend(image.values().iter().map(|&v| quantize(v)));
    out
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |detail: &str| -> Error {
        DataError::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        }
        .into()
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    if w != IMAGE_SIZE || h != IMAGE_SIZE {
        return Err(bad(&format!("expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {w}x{h}")));
    }
    let n = w * h * CHANNELS;
    if bytes.len() < pos + n {
        return Err(bad("truncated pixel data"));
    }
    let values = bytes[pos..pos + n].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![h, w, CHANNELS], values)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes several datasets under one root with a single manifest.
pub fn write_datasets(root: &Path, datasets: &[&Dataset]) -> Result<()> {
    let mut rows: Vec<[String; 7]> = Vec::new();
    for ds in datasets {
        let mut next_index: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &ds.samples {
            let idx = next_index.entry(&s.meta.container_id).or_insert(0);
            let rel = format!("{}/{}/{:06}.ppm", ds.role.name(), s.meta.container_id, idx);
            *idx += 1;
            let path = root.join(&rel);
            let dir = path.parent().expect("file has a parent");
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            fs::write(&path, encode_ppm(&s.image)).map_err(|e| Error::io(&path, e))?;
            rows.push([
                rel,
                ds.class_names[s.label].clone(),
                s.meta.container_id.clone(),
                s.meta.shape_family.clone(),
                s.meta.transparency.map_or("-", |t| t.name()).to_string(),
                s.meta.occluded.to_string(),
                s.meta.background_id.to_string(),
            ]);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::io(root.join(MANIFEST), std::io::Error::other(e));
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for row in &rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(root.join(MANIFEST), std::io::Error::other(e.to_string())))?;
    write_atomic(&root.join(MANIFEST), &bytes)
}

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    write_datasets(root, &[dataset])
}

fn list_ppm(dir: &Path, root: &Path, out: &mut BTreeSet<String>) -> Result<()> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(DataError::Read { path: dir.into(), source: e }.into()),
    };
    for entry in entries {
        let path = entry.map_err(|e| DataError::Read { path: dir.into(), source: e })?.path();
        if path.is_dir() {
            list_ppm(&path, root, out)?;
        } else if path.extension().is_some_and(|e| e == "ppm") {
            let rel = path.strip_prefix(root).expect("under root");
            out.insert(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Reads the samples of one role back, verifying the manifest against the files.
pub fn read_dataset(root: &Path, role: Role) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST);
    let bytes = fs::read(&manifest_path).map_err(|e| DataError::Read {
        path: manifest_path.clone(),
        source: e,
    })?;
    let format_err = |detail: String| -> Error {
        DataError::Format {
            path: manifest_path.clone(),
            detail,
        }
        .into()
    };
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| format_err(e.to_string()))?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(format_err(format!("unexpected header {header:?}")));
    }
    let prefix = format!("{}/", role.name());
    let class_names: Vec<String> = role.class_names();
    let mut listed = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| format_err(e.to_string()))?;
        if rec[0].starts_with(&prefix) {
            listed.push(rec);
        }
    }

    let mut on_disk = BTreeSet::new();
    list_ppm(&root.join(role.name()), root, &mut on_disk)?;
    let listed_names: BTreeSet<String> = listed.iter().map(|r| r[0].to_string()).collect();
    let missing: Vec<String> = listed_names.difference(&on_disk).cloned().collect();
    let unlisted: Vec<String> = on_disk.difference(&listed_names).cloned().collect();
    if !missing.is_empty() || !unlisted.is_empty() {
        return Err(DataError::Integrity { missing, unlisted }.into());
    }

    let mut samples = Vec::with_capacity(listed.len());
    let mut max_label = 0;
    for rec in &listed {
        let path: PathBuf = root.join(&rec[0]);
        let label = class_names
            .iter()
            .position(|c| c == &rec[1])
            .ok_or_else(|| format_err(format!("unknown class '{}' in {}", &rec[1], &rec[0])))?;
        max_label = max_label.max(label);
        let transparency = match &rec[4] {
            "-" => None,
            t => Some(t.parse::<Transparency>().map_err(format_err)?),
        };
        let occluded = rec[5].parse::<bool>().map_err(|e| format_err(e.to_string()))?;
        let background_id = rec[6].parse::<u32>().map_err(|e| format_err(e.to_string()))?;
        let data = fs::read(&path).map_err(|e| DataError::Read {
            path: path.clone(),
            source: e,
        })?;
        samples.push(ImageSample {
            image: decode_ppm(&data, &path)?,
            label,
            meta: SampleMeta {
                container_id: rec[2].to_string(),
                shape_family: rec[3].to_string(),
                transparency,
                occluded,
                background_id,
            },
        });
    }
    let class_names = match role {
        Role::Source => SOURCE_CLASSES[..(max_label + 1).max(2)].iter().map(|s| s.to_string()).collect(),
        _ => class_names,
    };
    let split_id = root.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    Ok(Dataset {
        samples,
        role,
        split_id,
        class_names,
    })
}
