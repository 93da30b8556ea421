//! Tab-separated patch manifest, one row per patch:
//! `slide_id  class_label  scale  region_id  relative_path  [grid_row  grid_col  signal]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::corpus::{ClassLabel, Region, Slide};
use super::pnm::{read_patch, write_patch};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

const REQUIRED: [&str; 5] = ["slide_id", "class_label", "scale", "region_id", "relative_path"];

/// Relative path under which a patch is exported.
pub fn patch_path(slide_id: &str, scale: usize, region_id: usize) -> PathBuf {
    PathBuf::from("patches")
        .join(slide_id)
        .join(format!("s{scale}_r{region_id:05}.ppm"))
}

/// Writes every patch as a P6 file plus the manifest into `dir`.
/// Returns the number of manifest rows.
pub fn export_corpus(slides: &[Slide], dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&manifest)
        .map_err(|e| csv_error(&manifest, e))?;
    w.write_record(REQUIRED.iter().chain(&["grid_row", "grid_col", "signal"]))
        .map_err(|e| csv_error(&manifest, e))?;
    let mut rows = 0;
    for slide in slides {
        for region in &slide.regions {
            for (&scale, patch) in &region.patches {
                let rel = patch_path(&slide.id, scale, region.id);
                write_patch(&dir.join(&rel), patch)?;
                let (row, col) = region
                    .position
                    .map(|(r, c)| (r.to_string(), c.to_string()))
                    .unwrap_or_default();
                let signal = region.signal.map(|s| u8::from(s).to_string()).unwrap_or_default();
                w.write_record([
                    slide.id.clone(),
                    slide.label.to_string(),
                    scale.to_string(),
                    region.id.to_string(),
                    rel.to_string_lossy().replace('\\', "/"),
                    row,
                    col,
                    signal,
                ])
                .map_err(|e| csv_error(&manifest, e))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

struct PendingSlide {
    label: ClassLabel,
    order: Vec<usize>,
    regions: HashMap<usize, Region>,
    /// Path of the first file seen for each region, for error messages.
    first_file: HashMap<usize, PathBuf>,
}

/// Reads a manifest and its patch files. `manifest` defaults to
/// `dir/manifest.tsv`; patch paths are relative to `dir`.
pub fn ingest_patch_directory(dir: &Path, manifest: Option<&Path>) -> Result<Vec<Slide>> {
    let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| dir.join(MANIFEST_FILE));
    if !manifest.is_file() {
        return Err(Error::Ingest {
            path: manifest,
            reason: "manifest not found".into(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(&manifest)
        .map_err(|e| csv_error(&manifest, e))?;
    let headers = reader.headers().map_err(|e| csv_error(&manifest, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name).ok_or_else(|| Error::Ingest {
            path: manifest.clone(),
            reason: format!("missing column {name}"),
        })?;
    }
    let [c_slide, c_label, c_scale, c_region, c_path] = idx;
    let (c_row, c_col, c_signal) = (col("grid_row"), col("grid_col"), col("signal"));

    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, PendingSlide> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(&manifest, e))?;
        let bad = |reason: String| Error::Ingest {
            path: manifest.clone(),
            reason: format!("row {}: {reason}", line + 2),
        };
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let optional = |i: Option<usize>| i.map(field).filter(|s| !s.is_empty());
        let slide_id = field(c_slide).to_string();
        let label: ClassLabel = field(c_label).parse().map_err(|e: Error| bad(e.to_string()))?;
        let scale: usize = field(c_scale).parse().map_err(|_| bad(format!("bad scale {:?}", field(c_scale))))?;
        let region_id: usize = field(c_region)
            .parse()
            .map_err(|_| bad(format!("bad region id {:?}", field(c_region))))?;
        let position = match (optional(c_row), optional(c_col)) {
            (Some(r), Some(c)) => Some((
                r.parse().map_err(|_| bad(format!("bad grid_row {r:?}")))?,
                c.parse().map_err(|_| bad(format!("bad grid_col {c:?}")))?,
            )),
            _ => None,
        };
        let signal = match optional(c_signal) {
            Some("1") => Some(true),
            Some("0") => Some(false),
            Some(other) => return Err(bad(format!("bad signal flag {other:?}"))),
            None => None,
        };
        let path = dir.join(field(c_path));
        let patch = read_patch(&path)?;

        let entry = pending.entry(slide_id.clone()).or_insert_with(|| {
            order.push(slide_id.clone());
            PendingSlide {
                label,
                order: Vec::new(),
                regions: HashMap::new(),
                first_file: HashMap::new(),
            }
        });
        if entry.label != label {
            return Err(bad(format!("slide {slide_id} has conflicting class labels")));
        }
        let region = entry.regions.entry(region_id).or_insert_with(|| Region {
            id: region_id,
            position,
            signal,
            patches: BTreeMap::new(),
        });
        if region.patches.insert(scale, patch).is_some() {
            return Err(Error::Ingest {
                path,
                reason: format!("duplicate patch for region {region_id} at scale {scale}"),
            });
        }
        if !entry.order.contains(&region_id) {
            entry.order.push(region_id);
            entry.first_file.insert(region_id, path);
        }
    }

    let mut slides = Vec::with_capacity(order.len());
    for (domain, id) in order.into_iter().enumerate() {
        let mut p = pending.remove(&id).expect("slide recorded");
        let scales: BTreeSet<usize> = p.regions.values().flat_map(|r| r.patches.keys().copied()).collect();
        let mut side = None;
        let mut regions = Vec::with_capacity(p.order.len());
        for rid in &p.order {
            let region = p.regions.remove(rid).expect("region recorded");
            let file = &p.first_file[rid];
            if let Some(missing) = scales.iter().find(|s| !region.patches.contains_key(s)) {
                return Err(Error::Ingest {
                    path: file.clone(),
                    reason: format!("region {rid} of slide {id} has no patch at scale {missing}"),
                });
            }
            for patch in region.patches.values() {
                if *side.get_or_insert(patch.side()) != patch.side() {
                    return Err(Error::Ingest {
                        path: file.clone(),
                        reason: format!("region {rid} of slide {id} has patch side {}", patch.side()),
                    });
                }
            }
            regions.push(region);
        }
        slides.push(Slide {
            id,
            label: p.label,
            domain,
            regions,
        });
    }
    if slides.is_empty() {
        return Err(Error::Ingest {
            path: manifest,
            reason: "manifest lists no patches".into(),
        });
    }
    Ok(slides)
}
