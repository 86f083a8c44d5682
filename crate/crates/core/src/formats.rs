//! On-disk formats: the scene container, the weight file, detection and label CSVs,
//! and JSON documents.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FloatLayer, LayerWeights, QuantLayer, WeightStore, BN_EPSILON};
use crate::pipeline::{BoxXyxy, ClassId, Detection, Grid, SceneRaster, BATHY_SPACING_M, PIXEL_SPACING_M};
use crate::quant::{QTensor, QuantParams};
use crate::scoring::GroundTruthLabel;
use crate::tensor::{BatchNormParams, Shape};

pub const SCENE_MAGIC: &[u8] = b"SARSCN1\n";
pub const WEIGHTS_MAGIC: &[u8] = b"YW8Q1\n";

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write through a temporary sibling and rename, so readers never see a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Split `bytes` after `magic` into the JSON header line and the payload.
fn split_header<'a>(bytes: &'a [u8], magic: &[u8], path: &Path) -> Result<(&'a [u8], &'a [u8])> {
    let rest = bytes
        .strip_prefix(magic)
        .ok_or_else(|| Error::format(path, "bad magic"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "header is not terminated"))?;
    Ok((&rest[..nl], &rest[nl + 1..]))
}

fn f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneHeader {
    scene_id: String,
    width: usize,
    height: usize,
    pixel_spacing_m: f64,
    bathy_width: usize,
    bathy_height: usize,
    bathy_spacing_m: f64,
    dtype: String,
}

pub fn encode_scene(s: &SceneRaster) -> Result<Vec<u8>> {
    let header = SceneHeader {
        scene_id: s.scene_id.clone(),
        width: s.width(),
        height: s.height(),
        pixel_spacing_m: PIXEL_SPACING_M,
        bathy_width: s.bathymetry.width(),
        bathy_height: s.bathymetry.height(),
        bathy_spacing_m: BATHY_SPACING_M,
        dtype: "f32le".into(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Invariant(e.to_string()))?;
    let mut out = Vec::with_capacity(SCENE_MAGIC.len() + json.len() + 1 + 4 * (2 * s.vv.data().len() + s.bathymetry.data().len()));
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&json);
    out.push(b'\n');
    push_f32(&mut out, s.vv.data());
    push_f32(&mut out, s.vh.data());
    push_f32(&mut out, s.bathymetry.data());
    Ok(out)
}

pub fn decode_scene(bytes: &[u8], path: &Path) -> Result<SceneRaster> {
    let (head, body) = split_header(bytes, SCENE_MAGIC, path)?;
    let h: SceneHeader =
        serde_json::from_slice(head).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if h.dtype != "f32le" {
        return Err(Error::format(path, format!("unsupported dtype `{}`", h.dtype)));
    }
    if h.pixel_spacing_m != PIXEL_SPACING_M || h.bathy_spacing_m != BATHY_SPACING_M {
        return Err(Error::format(
            path,
            format!(
                "spacing must be {PIXEL_SPACING_M} m / {BATHY_SPACING_M} m, got {} / {}",
                h.pixel_spacing_m, h.bathy_spacing_m
            ),
        ));
    }
    let plane = h.width.checked_mul(h.height);
    let bathy = h.bathy_width.checked_mul(h.bathy_height);
    let expected = plane
        .zip(bathy)
        .and_then(|(p, b)| p.checked_mul(2)?.checked_add(b)?.checked_mul(4))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {expected}", body.len()),
        ));
    }
    let (plane, bathy) = (plane.unwrap_or(0) * 4, bathy.unwrap_or(0));
    let grid = |w, h, bytes: &[u8]| Grid::new(w, h, f32_le(bytes));
    let vv = grid(h.width, h.height, &body[..plane])?;
    let vh = grid(h.width, h.height, &body[plane..2 * plane])?;
    let b = grid(h.bathy_width, h.bathy_height, &body[2 * plane..2 * plane + 4 * bathy])?;
    SceneRaster::new(h.scene_id, vv, vh, b).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_scene(path: &Path) -> Result<SceneRaster> {
    decode_scene(&read_file(path)?, path)
}

pub fn write_scene(path: &Path, s: &SceneRaster) -> Result<()> {
    write_file(path, &encode_scene(s)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    I8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fraction_bits: Option<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsHeader {
    records: Vec<Record>,
}

enum Blob {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

struct Entry {
    record: Record,
    blob: Blob,
}

impl Entry {
    fn f32(name: String, shape: Vec<usize>, fraction_bits: Option<u8>, v: Vec<f32>) -> Self {
        Self {
            record: Record {
                name,
                dtype: Dtype::F32,
                shape,
                fraction_bits,
            },
            blob: Blob::F32(v),
        }
    }

    fn i8(name: String, shape: Vec<usize>, fraction_bits: u8, v: Vec<i8>) -> Self {
        Self {
            record: Record {
                name,
                dtype: Dtype::I8,
                shape,
                fraction_bits: Some(fraction_bits),
            },
            blob: Blob::I8(v),
        }
    }
}

fn layer_entries(name: &str, w: &LayerWeights) -> Vec<Entry> {
    let n = |suffix: &str| format!("{name}.{suffix}");
    let mut out = Vec::new();
    match w {
        LayerWeights::Float(f) => {
            out.push(Entry::f32(n("weight"), f.kernel_shape.to_vec(), None, f.kernel.clone()));
            if let Some(b) = &f.bias {
                out.push(Entry::f32(n("bias"), vec![b.len()], None, b.clone()));
            }
            if let Some(bn) = &f.batch_norm {
                let c = bn.channels();
                out.push(Entry::f32(n("bn.gamma"), vec![c], None, bn.gamma.clone()));
                out.push(Entry::f32(n("bn.beta"), vec![c], None, bn.beta.clone()));
                out.push(Entry::f32(n("bn.mean"), vec![c], None, bn.running_mean.clone()));
                out.push(Entry::f32(n("bn.var"), vec![c], None, bn.running_var.clone()));
                out.push(Entry::f32(n("bn.eps"), vec![1], None, vec![bn.epsilon]));
            }
        }
        LayerWeights::Quantized(q) => {
            let fw = q.weight.qp().fraction_bits();
            let fx = q.input.fraction_bits();
            out.push(Entry::i8(n("weight"), q.kernel_shape().to_vec(), fw, q.weight.data().to_vec()));
            // Bias integers at scale 2^−(fx + fw); calibration keeps them within
            // the exact f32 integer range.
            out.push(Entry::f32(
                n("bias"),
                vec![q.bias.len()],
                Some(fx + fw),
                q.bias.iter().map(|&b| b as f32).collect(),
            ));
            out.push(Entry::i8(n("input"), vec![0], fx, Vec::new()));
            out.push(Entry::i8(n("output"), vec![0], q.output.fraction_bits(), Vec::new()));
        }
    }
    out
}

pub fn encode_weights(store: &WeightStore) -> Result<Vec<u8>> {
    for (_, w) in store.iter() {
        if let LayerWeights::Quantized(q) = w {
            if let Some(b) = q.bias.iter().find(|b| b.unsigned_abs() > 1 << 24) {
                return Err(Error::Numeric(format!("bias {b} is not exactly representable in f32")));
            }
        }
    }
    let entries: Vec<Entry> = store.iter().flat_map(|(name, w)| layer_entries(name, w)).collect();
    let header = WeightsHeader {
        records: entries.iter().map(|e| e.record.clone()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Invariant(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&json);
    out.push(b'\n');
    for e in &entries {
        match &e.blob {
            Blob::F32(v) => push_f32(&mut out, v),
            Blob::I8(v) => out.extend(v.iter().map(|&b| b as u8)),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

const SUFFIXES: [&str; 9] = [
    ".weight", ".bias", ".bn.gamma", ".bn.beta", ".bn.mean", ".bn.var", ".bn.eps", ".input", ".output",
];

fn split_name(name: &str) -> Option<(&str, &str)> {
    SUFFIXES
        .iter()
        .find_map(|s| name.strip_suffix(s).map(|layer| (layer, &s[1..])))
        .filter(|(layer, _)| !layer.is_empty())
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<WeightStore> {
    if bytes.len() < WEIGHTS_MAGIC.len() + 4 || !bytes.starts_with(WEIGHTS_MAGIC) {
        return Err(Error::format(path, "bad magic"));
    }
    let (content, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(content) != stored {
        return Err(Error::format(path, "CRC mismatch"));
    }
    let (head, mut body) = split_header(content, WEIGHTS_MAGIC, path)?;
    let header: WeightsHeader =
        serde_json::from_slice(head).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let mut seen = HashSet::new();
    let mut layers: BTreeMap<String, Parts> = BTreeMap::new();
    for r in header.records {
        if !seen.insert(r.name.clone()) {
            return Err(Error::format(path, format!("duplicate record `{}`", r.name)));
        }
        let count = r
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("record `{}` is too large", r.name)))?;
        let len = count * r.dtype.size();
        if body.len() < len {
            return Err(Error::format(path, format!("truncated blob for `{}`", r.name)));
        }
        let (raw, rest) = body.split_at(len);
        body = rest;
        let blob = match r.dtype {
            Dtype::F32 => Blob::F32(f32_le(raw)),
            Dtype::I8 => Blob::I8(raw.iter().map(|&b| b as i8).collect()),
        };
        let (layer, part) = split_name(&r.name)
            .ok_or_else(|| Error::format(path, format!("unrecognised record `{}`", r.name)))?;
        layers
            .entry(layer.to_string())
            .or_default()
            .insert(part.to_string(), (r, blob));
    }
    if !body.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes after the last blob", body.len())));
    }
    let mut store = WeightStore::new();
    for (name, parts) in layers {
        let w = assemble_layer(&name, parts).map_err(|reason| Error::format(path, format!("layer `{name}`: {reason}")))?;
        store.insert(name, w);
    }
    Ok(store)
}

type Parts = BTreeMap<String, (Record, Blob)>;

fn take_f32(parts: &mut Parts, part: &str) -> std::result::Result<Option<(Record, Vec<f32>)>, String> {
    match parts.remove(part) {
        None => Ok(None),
        Some((r, Blob::F32(v))) => Ok(Some((r, v))),
        Some(_) => Err(format!("`{part}` must be f32")),
    }
}

fn assemble_layer(name: &str, mut parts: Parts) -> std::result::Result<LayerWeights, String> {
    let fraction = |r: &Record| -> std::result::Result<QuantParams, String> {
        let f = r.fraction_bits.ok_or_else(|| format!("`{}` needs fraction_bits", r.name))?;
        QuantParams::new(f).map_err(|e| e.to_string())
    };
    let kernel_shape = |r: &Record| -> std::result::Result<[usize; 4], String> {
        <[usize; 4]>::try_from(r.shape.as_slice()).map_err(|_| format!("weight shape {:?} is not 4-D", r.shape))
    };
    let (wrec, wblob) = parts.remove("weight").ok_or("missing weight record")?;
    let shape = kernel_shape(&wrec)?;
    let out = match wblob {
        Blob::F32(kernel) => {
            let bias = take_f32(&mut parts, "bias")?.map(|(_, v)| v);
            let bn = ["bn.gamma", "bn.beta", "bn.mean", "bn.var", "bn.eps"]
                .iter()
                .map(|p| take_f32(&mut parts, p))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let batch_norm = match bn.iter().filter(|b| b.is_some()).count() {
                0 => None,
                5 => {
                    let mut it = bn.into_iter().flatten().map(|(_, v)| v);
                    let mut next = || it.next().unwrap_or_default();
                    let (gamma, beta, running_mean, running_var) = (next(), next(), next(), next());
                    let eps = next();
                    Some(BatchNormParams {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        epsilon: eps.first().copied().unwrap_or(BN_EPSILON),
                    })
                }
                _ => return Err("incomplete batch norm records".into()),
            };
            LayerWeights::Float(FloatLayer {
                kernel,
                kernel_shape: shape,
                bias,
                batch_norm,
            })
        }
        Blob::I8(data) => {
            let wqp = fraction(&wrec)?;
            let marker = |parts: &mut Parts, p: &str| {
                let (r, _) = parts.remove(p).ok_or_else(|| format!("missing `{p}` marker"))?;
                fraction(&r)
            };
            let input = marker(&mut parts, "input")?;
            let output = marker(&mut parts, "output")?;
            let (brec, bias) = match parts.remove("bias") {
                Some((r, Blob::F32(v))) => (r, v),
                _ => return Err("quantized layer needs an f32 bias record".into()),
            };
            let expect = input.fraction_bits() + wqp.fraction_bits();
            if brec.fraction_bits != Some(expect) {
                return Err(format!("bias fraction_bits {:?}, expected {expect}", brec.fraction_bits));
            }
            let bias = bias
                .iter()
                .map(|&b| {
                    if b.fract() == 0.0 && b.abs() <= (1 << 24) as f32 {
                        Ok(b as i32)
                    } else {
                        Err(format!("bias value {b} is not an integer"))
                    }
                })
                .collect::<std::result::Result<Vec<i32>, _>>()?;
            let [co, ci, kh, kw] = shape;
            let weight = QTensor::new(Shape::new(co, ci, kh, kw), data, wqp).map_err(|e| e.to_string())?;
            LayerWeights::Quantized(QuantLayer {
                weight,
                bias,
                input,
                output,
            })
        }
    };
    if let Some(extra) = parts.keys().next() {
        return Err(format!("unexpected `{extra}` record for {name}"));
    }
    Ok(out)
}

pub fn read_weights(path: &Path) -> Result<WeightStore> {
    decode_weights(&read_file(path)?, path)
}

pub fn write_weights(path: &Path, store: &WeightStore) -> Result<()> {
    write_file(path, &encode_weights(store)?)
}

const DETECTION_COLUMNS: [&str; 9] = [
    "scene_id",
    "detect_scene_row",
    "detect_scene_column",
    "x1",
    "y1",
    "x2",
    "y2",
    "class",
    "score",
];
const SHORE_COLUMN: &str = "distance_from_shore_km";
const LABEL_COLUMNS: [&str; 7] = [
    "scene_id",
    "detect_scene_row",
    "detect_scene_column",
    "is_vessel",
    "is_fishing",
    "confidence",
    SHORE_COLUMN,
];

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        line,
        reason: e.to_string(),
    }
}

fn csv_bytes(rows: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    rows(&mut w).map_err(|e| Error::Invariant(e.to_string()))?;
    w.into_inner().map_err(|e| Error::Invariant(e.to_string()))
}

/// Detections CSV. With `with_shore`, a trailing `distance_from_shore_km` column
/// carries each detection's shore distance (empty when unknown).
pub fn encode_detections(dets: &[Detection], with_shore: bool) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        let mut header: Vec<&str> = DETECTION_COLUMNS.to_vec();
        if with_shore {
            header.push(SHORE_COLUMN);
        }
        w.write_record(&header)?;
        for d in dets {
            let mut row = vec![
                d.scene_id.clone(),
                d.row.to_string(),
                d.col.to_string(),
                d.bbox.x1.to_string(),
                d.bbox.y1.to_string(),
                d.bbox.x2.to_string(),
                d.bbox.y2.to_string(),
                d.class_id.name().to_string(),
                d.score.to_string(),
            ];
            if with_shore {
                row.push(d.shore_km.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        Ok(())
    })
}

struct Columns {
    index: Vec<Option<usize>>,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord, wanted: &[&str], required: usize) -> Result<Self> {
        let index: Vec<Option<usize>> = wanted
            .iter()
            .map(|w| headers.iter().position(|h| h.trim() == *w))
            .collect();
        if let Some(missing) = wanted[..required].iter().zip(&index).find(|(_, i)| i.is_none()) {
            return Err(Error::Parse {
                line: 1,
                reason: format!("missing column `{}`", missing.0),
            });
        }
        Ok(Self { index })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, k: usize) -> Option<&'r str> {
        self.index[k].and_then(|i| rec.get(i)).map(str::trim)
    }
}

fn parse_field<T: std::str::FromStr>(v: Option<&str>, name: &str, line: u64) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = v.ok_or_else(|| Error::Parse {
        line,
        reason: format!("missing `{name}`"),
    })?;
    v.parse().map_err(|e| Error::Parse {
        line,
        reason: format!("bad `{name}` value `{v}`: {e}"),
    })
}

fn records(bytes: &[u8]) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = r.headers().map_err(csv_error)?.clone();
    if headers.is_empty() {
        return Err(Error::Parse {
            line: 1,
            reason: "missing header row".into(),
        });
    }
    let rows = r.records().collect::<csv::Result<Vec<_>>>().map_err(csv_error)?;
    Ok((headers, rows))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

pub fn decode_detections(bytes: &[u8]) -> Result<Vec<Detection>> {
    let (headers, rows) = records(bytes)?;
    let mut wanted = DETECTION_COLUMNS.to_vec();
    wanted.push(SHORE_COLUMN);
    let cols = Columns::resolve(&headers, &wanted, DETECTION_COLUMNS.len())?;
    let mut out = Vec::with_capacity(rows.len());
    for rec in &rows {
        let line = line_of(rec);
        let num = |k: usize| parse_field::<f64>(cols.get(rec, k), wanted[k], line);
        let bbox = BoxXyxy::new(num(3)?, num(4)?, num(5)?, num(6)?);
        let class: ClassId = parse_field(cols.get(rec, 7), "class", line)?;
        let shore_km = match cols.get(rec, 9) {
            None | Some("") => None,
            Some(v) => Some(parse_field::<f64>(Some(v), SHORE_COLUMN, line)?),
        };
        out.push(Detection {
            scene_id: cols.get(rec, 0).unwrap_or_default().to_string(),
            row: num(1)?,
            col: num(2)?,
            bbox,
            class_id: class,
            score: num(8)?,
            shore_km,
        });
    }
    Ok(out)
}

fn parse_opt_bool(v: Option<&str>, name: &str, line: u64) -> Result<Option<bool>> {
    match v.unwrap_or("") {
        "" => Ok(None),
        "true" | "True" | "TRUE" | "1" => Ok(Some(true)),
        "false" | "False" | "FALSE" | "0" => Ok(Some(false)),
        other => Err(Error::Parse {
            line,
            reason: format!("bad `{name}` value `{other}`"),
        }),
    }
}

fn opt_bool(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "true",
        Some(false) => "false",
        None => "",
    }
}

pub fn encode_labels(labels: &[GroundTruthLabel]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(LABEL_COLUMNS)?;
        for l in labels {
            w.write_record([
                l.scene_id.clone(),
                l.row.to_string(),
                l.col.to_string(),
                opt_bool(l.is_vessel).into(),
                opt_bool(l.is_fishing).into(),
                l.confidence.name().into(),
                l.distance_from_shore_km.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<GroundTruthLabel>> {
    let (headers, rows) = records(bytes)?;
    let cols = Columns::resolve(&headers, &LABEL_COLUMNS, LABEL_COLUMNS.len())?;
    let mut out = Vec::with_capacity(rows.len());
    for rec in &rows {
        let line = line_of(rec);
        let l = GroundTruthLabel {
            scene_id: cols.get(rec, 0).unwrap_or_default().to_string(),
            row: parse_field(cols.get(rec, 1), LABEL_COLUMNS[1], line)?,
            col: parse_field(cols.get(rec, 2), LABEL_COLUMNS[2], line)?,
            is_vessel: parse_opt_bool(cols.get(rec, 3), LABEL_COLUMNS[3], line)?,
            is_fishing: parse_opt_bool(cols.get(rec, 4), LABEL_COLUMNS[4], line)?,
            confidence: parse_field(cols.get(rec, 5), LABEL_COLUMNS[5], line)?,
            distance_from_shore_km: parse_field(cols.get(rec, 6), LABEL_COLUMNS[6], line)?,
        };
        l.validate().map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        out.push(l);
    }
    Ok(out)
}

fn with_path<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { line, reason } => Error::format(path, format!("line {line}: {reason}")),
        other => other,
    })
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    with_path(decode_detections(&read_file(path)?), path)
}

pub fn write_detections(path: &Path, dets: &[Detection], with_shore: bool) -> Result<()> {
    write_file(path, &encode_detections(dets, with_shore)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<GroundTruthLabel>> {
    with_path(decode_labels(&read_file(path)?), path)
}

pub fn write_labels(path: &Path, labels: &[GroundTruthLabel]) -> Result<()> {
    write_file(path, &encode_labels(labels)?)
}

/// Pretty JSON with a trailing newline.
pub fn encode_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| Error::Invariant(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    decode_json(&read_file(path)?, path)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_file(path, &encode_json(v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::scoring::Confidence;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn scene_round_trip() {
        let s = SceneRaster::new(
            "abc",
            Grid::new(3, 2, vec![1.0, f32::NAN, -3.5, 4.0, 5.0, 6.0]).unwrap(),
            Grid::filled(3, 2, -20.0),
            Grid::filled(1, 1, -100.0),
        )
        .unwrap();
        let bytes = encode_scene(&s).unwrap();
        assert!(bytes.starts_with(SCENE_MAGIC));
        let back = decode_scene(&bytes, p()).unwrap();
        assert_eq!(encode_scene(&back).unwrap(), bytes);
        assert_eq!(back.scene_id, "abc");
        assert!(back.vv.get(0, 1).is_nan());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_scene(&bad, p()), Err(Error::Format { .. })));
        assert!(decode_scene(&bytes[..bytes.len() - 1], p()).is_err());
    }

    #[test]
    fn weights_round_trip_and_crc() {
        let g = build_model(&"yolov8n-ghost".parse().unwrap()).unwrap();
        let store = WeightStore::seeded(&g, 4);
        let bytes = encode_weights(&store).unwrap();
        let back = decode_weights(&bytes, p()).unwrap();
        assert_eq!(back, store);
        assert_eq!(encode_weights(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        match decode_weights(&bad, p()) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("CRC")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detection_csv_round_trip() {
        let mut d = Detection::from_box("s1", BoxXyxy::new(1.5, 2.0, 10.25, 12.0), ClassId::NonFishing, 0.123456789);
        let e = d.clone();
        d.shore_km = Some(f64::INFINITY);
        let bytes = encode_detections(&[d.clone(), e.clone()], true).unwrap();
        let back = decode_detections(&bytes).unwrap();
        assert_eq!(back, vec![d, e.clone()]);
        assert_eq!(encode_detections(&back, true).unwrap(), bytes);

        let plain = encode_detections(&[e.clone()], false).unwrap();
        assert_eq!(
            String::from_utf8(plain.clone()).unwrap().lines().next().unwrap(),
            "scene_id,detect_scene_row,detect_scene_column,x1,y1,x2,y2,class,score"
        );
        assert_eq!(decode_detections(&plain).unwrap(), vec![e]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "scene_id,detect_scene_row,detect_scene_column,x1,y1,x2,y2,class,score\n\
                    a,1,2,0,0,4,4,fishing,0.5\n\
                    a,1,2,0,0,4,4,submarine,0.5\n";
        match decode_detections(text.as_bytes()) {
            Err(Error::Parse { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("submarine"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_detections(b"a,b\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn labels_round_trip_and_invariant() {
        let labels = vec![GroundTruthLabel {
            scene_id: "s".into(),
            row: 12.0,
            col: 400.0,
            is_vessel: Some(true),
            is_fishing: None,
            confidence: Confidence::Medium,
            distance_from_shore_km: 1.5,
        }];
        let bytes = encode_labels(&labels).unwrap();
        assert_eq!(
            String::from_utf8(bytes.clone()).unwrap(),
            "scene_id,detect_scene_row,detect_scene_column,is_vessel,is_fishing,confidence,distance_from_shore_km\n\
             s,12,400,true,,MEDIUM,1.5\n"
        );
        assert_eq!(decode_labels(&bytes).unwrap(), labels);
        let bad = b"scene_id,detect_scene_row,detect_scene_column,is_vessel,is_fishing,confidence,distance_from_shore_km\n\
                    s,1,1,false,true,HIGH,3\n";
        assert!(matches!(decode_labels(bad), Err(Error::Parse { line: 2, .. })));
    }
}
