//! On-disk formats.
//!
//! | artifact        | encoding                                                      |
//! |-----------------|---------------------------------------------------------------|
//! | mesh            | text: `mesh V T`, then `v x y z` and `t i j k` lines            |
//! | graph           | text: `graph V E`, then `e i j` lines (i < j)                   |
//! | labels          | text: one integer per line                                    |
//! | time series     | `TSF1`, u32 T, u32 N, T·N f32 LE, time-major                  |
//! | matrix          | `MAT1`, u32 rows, u32 cols, rows·cols f64 LE, row-major       |
//! | checkpoint      | `GDPC`, u32 version, u32 d/H/head_dim/N_roi, f64 τ, f64 blocks |
//! | key=value config| text, `#` comments                                            |
//! | history         | CSV `step,lr,cls_loss,ent_loss[,val_dice]`                    |
//!
//! Every writer goes through [`atomic_write`]. Readers report the line
//! (text) or byte offset (binary) of the first problem.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::connectome::TimeSeriesMatrix;
use crate::error::{GdaipError, Result};
use crate::gat::{ModelDims, ModelParams};
use crate::mesh_graph::{AdjacencyMatrix, Parcellation, SurfaceMesh};
use crate::trainer::{TrainConfig, TrainHistory};

pub const TSF_MAGIC: &[u8; 4] = b"TSF1";
pub const MAT_MAGIC: &[u8; 4] = b"MAT1";
pub const CKPT_MAGIC: &[u8; 4] = b"GDPC";
pub const CKPT_VERSION: u32 = 1;

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GdaipError::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| GdaipError::Input(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(GdaipError::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| GdaipError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| GdaipError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GdaipError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GdaipError {
    GdaipError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> GdaipError {
    GdaipError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Non-empty lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: Option<&str>, what: &str) -> Result<T> {
    let field = field.ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    field
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} {field:?}")))
}

fn expect_end<'a>(path: &Path, line: usize, mut rest: impl Iterator<Item = &'a str>) -> Result<()> {
    match rest.next() {
        Some(extra) => Err(parse_err(path, line, format!("unexpected trailing field {extra:?}"))),
        None => Ok(()),
    }
}

pub fn mesh_to_string(mesh: &SurfaceMesh) -> String {
    let mut out = format!("mesh {} {}\n", mesh.vertex_count(), mesh.triangles().len());
    for [x, y, z] in mesh.coords() {
        out.push_str(&format!("v {x} {y} {z}\n"));
    }
    for [i, j, k] in mesh.triangles() {
        out.push_str(&format!("t {i} {j} {k}\n"));
    }
    out
}

pub fn write_mesh(path: &Path, mesh: &SurfaceMesh) -> Result<()> {
    atomic_write(path, mesh_to_string(mesh).as_bytes())
}

pub fn read_mesh(path: &Path) -> Result<SurfaceMesh> {
    let text = read_text(path)?;
    let mut lines = content_lines(&text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty mesh file"))?;
    let mut f = header.split_whitespace();
    if f.next() != Some("mesh") {
        return Err(parse_err(path, hl, "expected header `mesh <vertices> <triangles>`"));
    }
    let nv: usize = parse_field(path, hl, f.next(), "vertex count")?;
    let nt: usize = parse_field(path, hl, f.next(), "triangle count")?;
    expect_end(path, hl, f)?;
    let mut coords = Vec::with_capacity(nv);
    let mut triangles = Vec::with_capacity(nt);
    let mut last = hl;
    for (ln, line) in lines {
        last = ln;
        let mut f = line.split_whitespace();
        match f.next() {
            Some("v") if triangles.is_empty() && coords.len() < nv => {
                let x = parse_field(path, ln, f.next(), "x")?;
                let y = parse_field(path, ln, f.next(), "y")?;
                let z = parse_field(path, ln, f.next(), "z")?;
                expect_end(path, ln, f)?;
                coords.push([x, y, z]);
            }
            Some("t") if coords.len() == nv && triangles.len() < nt => {
                let i = parse_field(path, ln, f.next(), "vertex index")?;
                let j = parse_field(path, ln, f.next(), "vertex index")?;
                let k = parse_field(path, ln, f.next(), "vertex index")?;
                expect_end(path, ln, f)?;
                triangles.push([i, j, k]);
            }
            Some(tag) => {
                return Err(parse_err(
                    path,
                    ln,
                    format!(
                        "unexpected record {tag:?} after {} of {nv} vertices and {} of {nt} triangles",
                        coords.len(),
                        triangles.len()
                    ),
                ))
            }
            None => unreachable!("blank lines are skipped"),
        }
    }
    if coords.len() != nv || triangles.len() != nt {
        return Err(parse_err(
            path,
            last,
            format!(
                "header promised {nv} vertices and {nt} triangles, found {} and {}",
                coords.len(),
                triangles.len()
            ),
        ));
    }
    SurfaceMesh::new(coords, triangles)
}

pub fn graph_to_string(adj: &AdjacencyMatrix) -> String {
    let mut out = format!("graph {} {}\n", adj.vertex_count(), adj.edge_count());
    for (i, j) in adj.edges() {
        out.push_str(&format!("e {i} {j}\n"));
    }
    out
}

pub fn write_graph(path: &Path, adj: &AdjacencyMatrix) -> Result<()> {
    atomic_write(path, graph_to_string(adj).as_bytes())
}

pub fn read_graph(path: &Path) -> Result<AdjacencyMatrix> {
    let text = read_text(path)?;
    let mut lines = content_lines(&text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty graph file"))?;
    let mut f = header.split_whitespace();
    if f.next() != Some("graph") {
        return Err(parse_err(path, hl, "expected header `graph <vertices> <edges>`"));
    }
    let nv: usize = parse_field(path, hl, f.next(), "vertex count")?;
    let ne: usize = parse_field(path, hl, f.next(), "edge count")?;
    expect_end(path, hl, f)?;
    let mut lists = vec![Vec::new(); nv];
    let mut seen = 0;
    let mut last = hl;
    for (ln, line) in lines {
        last = ln;
        let mut f = line.split_whitespace();
        if f.next() != Some("e") {
            return Err(parse_err(path, ln, "expected `e <i> <j>`"));
        }
        let i: usize = parse_field(path, ln, f.next(), "vertex index")?;
        let j: usize = parse_field(path, ln, f.next(), "vertex index")?;
        expect_end(path, ln, f)?;
        if i >= nv || j >= nv || i == j {
            return Err(parse_err(path, ln, format!("invalid edge ({i}, {j}) for {nv} vertices")));
        }
        lists[i].push(j);
        seen += 1;
    }
    if seen != ne {
        return Err(parse_err(path, last, format!("header promised {ne} edges, found {seen}")));
    }
    AdjacencyMatrix::from_neighbor_lists(lists)
}

pub fn labels_to_string(labels: &[usize]) -> String {
    let mut out = String::with_capacity(labels.len() * 4);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

pub fn write_labels(path: &Path, parcellation: &Parcellation) -> Result<()> {
    atomic_write(path, labels_to_string(parcellation.labels()).as_bytes())
}

/// Raw label column; blank lines are rejected so that line `i` is vertex `i - 1`.
pub fn read_label_values(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| parse_field(path, i + 1, Some(l.trim()), "label"))
        .collect()
}

/// Labels as a parcellation with `n_roi` regions, or `max + 1` if not given.
pub fn read_labels(path: &Path, n_roi: Option<usize>) -> Result<Parcellation> {
    let labels = read_label_values(path)?;
    let n_roi = match n_roi {
        Some(n) => n,
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_roi) {
        return Err(parse_err(path, i + 1, format!("label {l} out of range for {n_roi} ROIs")));
    }
    Parcellation::new(labels, n_roi)
}

fn header_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn check_container(path: &Path, bytes: &[u8], magic: &[u8; 4], header_len: usize) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(format_err(
            path,
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < header_len {
        return Err(format_err(path, bytes.len(), "truncated header"));
    }
    Ok(())
}

fn check_payload(path: &Path, bytes: &[u8], start: usize, expected: usize) -> Result<()> {
    let have = bytes.len() - start;
    if have < expected {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {have}"),
        ));
    }
    if have > expected {
        return Err(format_err(
            path,
            start + expected,
            format!("{} trailing bytes after payload", have - expected),
        ));
    }
    Ok(())
}

fn dim_u32(what: &str, n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| GdaipError::Size(format!("{what} {n} does not fit in u32")))
}

/// Values are stored as f32.
pub fn time_series_bytes(ts: &TimeSeriesMatrix) -> Result<Vec<u8>> {
    let data = ts.data();
    let (t, n) = data.dim();
    let mut out = Vec::with_capacity(12 + 4 * t * n);
    out.extend_from_slice(TSF_MAGIC);
    out.extend_from_slice(&dim_u32("T", t)?.to_le_bytes());
    out.extend_from_slice(&dim_u32("N", n)?.to_le_bytes());
    for &v in data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn write_time_series(path: &Path, ts: &TimeSeriesMatrix) -> Result<()> {
    atomic_write(path, &time_series_bytes(ts)?)
}

pub fn parse_time_series(path: &Path, bytes: &[u8]) -> Result<TimeSeriesMatrix> {
    check_container(path, bytes, TSF_MAGIC, 12)?;
    let t = header_u32(bytes, 4) as usize;
    let n = header_u32(bytes, 8) as usize;
    check_payload(path, bytes, 12, 4 * t * n)?;
    let values: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(format_err(path, 12 + 4 * i, "non-finite sample"));
    }
    let data = Array2::from_shape_vec((t, n), values).expect("payload length checked");
    TimeSeriesMatrix::new(data).map_err(|e| format_err(path, 4, e.to_string()))
}

pub fn read_time_series(path: &Path) -> Result<TimeSeriesMatrix> {
    parse_time_series(path, &read_bytes(path)?)
}

pub fn matrix_bytes(m: &Array2<f64>) -> Result<Vec<u8>> {
    let (r, c) = m.dim();
    let mut out = Vec::with_capacity(12 + 8 * r * c);
    out.extend_from_slice(MAT_MAGIC);
    out.extend_from_slice(&dim_u32("rows", r)?.to_le_bytes());
    out.extend_from_slice(&dim_u32("cols", c)?.to_le_bytes());
    for &v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    atomic_write(path, &matrix_bytes(m)?)
}

pub fn parse_matrix(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    check_container(path, bytes, MAT_MAGIC, 12)?;
    let r = header_u32(bytes, 4) as usize;
    let c = header_u32(bytes, 8) as usize;
    check_payload(path, bytes, 12, 8 * r * c)?;
    let values: Vec<f64> = bytes[12..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((r, c), values).expect("payload length checked"))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    parse_matrix(path, &read_bytes(path)?)
}

const CKPT_HEADER: usize = 4 + 4 + 4 * 4 + 8;

pub fn checkpoint_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let d = &params.dims;
    let mut out = Vec::with_capacity(CKPT_HEADER + 8 * params.parameter_count());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for (what, v) in [("d", d.in_dim), ("H", d.heads), ("head_dim", d.head_dim), ("N_roi", d.n_roi)] {
        out.extend_from_slice(&dim_u32(what, v)?.to_le_bytes());
    }
    out.extend_from_slice(&d.tau.to_le_bytes());
    for block in params.blocks() {
        for &v in block.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(params)?)
}

pub fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<ModelParams> {
    check_container(path, bytes, CKPT_MAGIC, CKPT_HEADER)?;
    let version = header_u32(bytes, 4);
    if version != CKPT_VERSION {
        return Err(format_err(path, 4, format!("unsupported checkpoint version {version}")));
    }
    let dims = ModelDims {
        in_dim: header_u32(bytes, 8) as usize,
        heads: header_u32(bytes, 12) as usize,
        head_dim: header_u32(bytes, 16) as usize,
        n_roi: header_u32(bytes, 20) as usize,
        tau: f64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes")),
    };
    dims.validate().map_err(|e| format_err(path, 8, e.to_string()))?;
    let shapes = ModelParams::block_shapes(&dims);
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    check_payload(path, bytes, CKPT_HEADER, 8 * total)?;
    let mut offset = CKPT_HEADER;
    let mut blocks = Vec::with_capacity(shapes.len());
    for (r, c) in shapes {
        let values: Vec<f64> = bytes[offset..offset + 8 * r * c]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format_err(path, offset + 8 * i, "non-finite parameter"));
        }
        offset += 8 * r * c;
        blocks.push(Array2::from_shape_vec((r, c), values).expect("sized above"));
    }
    ModelParams::from_blocks(dims, blocks).map_err(|e| format_err(path, 8, e.to_string()))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    parse_checkpoint(path, &read_bytes(path)?)
}

/// `key = value` pairs with their line numbers; `#` starts a comment.
pub fn parse_key_values(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, i + 1, format!("expected key=value, got {line:?}")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(parse_err(path, i + 1, "empty key"));
        }
        if out.iter().any(|(_, seen, _): &(usize, String, String)| seen == k) {
            return Err(parse_err(path, i + 1, format!("duplicate key {k:?}")));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub const TRAIN_KEYS: [&str; 9] = [
    "steps",
    "lr0",
    "lr_halving_period",
    "momentum",
    "weight_decay",
    "lambda_mme",
    "tau",
    "core_fraction",
    "seed",
];

/// Sets one training field from text. Returns `Ok(false)` for keys that
/// are not training fields.
pub fn apply_train_key(config: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<bool, String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
        value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
    }
    match key {
        "steps" => config.steps = num(key, value)?,
        "lr0" => config.lr0 = num(key, value)?,
        "lr_halving_period" => config.lr_halving_period = num(key, value)?,
        "momentum" => config.momentum = num(key, value)?,
        "weight_decay" => config.weight_decay = num(key, value)?,
        "lambda_mme" => config.lambda_mme = num(key, value)?,
        "tau" => config.tau = num(key, value)?,
        "core_fraction" => config.core_fraction = num(key, value)?,
        "seed" => config.seed = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn train_config_to_string(config: &TrainConfig) -> String {
    format!(
        "steps = {}\nlr0 = {}\nlr_halving_period = {}\nmomentum = {}\nweight_decay = {}\nlambda_mme = {}\ntau = {}\ncore_fraction = {}\nseed = {}\n",
        config.steps,
        config.lr0,
        config.lr_halving_period,
        config.momentum,
        config.weight_decay,
        config.lambda_mme,
        config.tau,
        config.core_fraction,
        config.seed
    )
}

pub fn write_train_config(path: &Path, config: &TrainConfig) -> Result<()> {
    atomic_write(path, train_config_to_string(config).as_bytes())
}

/// Unspecified fields keep their defaults; unknown keys are errors.
pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (line, key, value) in parse_key_values(path, &read_text(path)?)? {
        match apply_train_key(&mut config, &key, &value) {
            Ok(true) => {}
            Ok(false) => return Err(parse_err(path, line, format!("unknown key {key:?}"))),
            Err(msg) => return Err(parse_err(path, line, msg)),
        }
    }
    Ok(config)
}

fn csv_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// The `val_dice` column appears only when some step recorded it.
pub fn history_to_csv(history: &TrainHistory) -> String {
    let with_val = history.records.iter().any(|r| r.val_dice.is_some());
    let mut out = String::from(if with_val {
        "step,lr,cls_loss,ent_loss,val_dice\n"
    } else {
        "step,lr,cls_loss,ent_loss\n"
    });
    for r in &history.records {
        out.push_str(&format!(
            "{},{},{},{}",
            r.step,
            r.lr,
            csv_float(r.cls_loss),
            csv_float(r.ent_loss)
        ));
        if with_val {
            out.push(',');
            if let Some(v) = r.val_dice {
                out.push_str(&csv_float(v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    atomic_write(path, history_to_csv(history).as_bytes())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| GdaipError::Input(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

/// Fails with an actionable message before any work starts.
pub fn require_file(path: &Path, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(GdaipError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_graph::icosphere;
    use crate::trainer::StepRecord;
    use tempfile::tempdir;

    #[test]
    fn mesh_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.mesh");
        let mesh = icosphere(2).unwrap();
        write_mesh(&p, &mesh).unwrap();
        let back = read_mesh(&p).unwrap();
        assert_eq!(back, mesh);
        assert_eq!(mesh_to_string(&back), fs::read_to_string(&p).unwrap());
    }

    #[test]
    fn mesh_parse_errors_name_lines() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.mesh");
        fs::write(&p, "mesh 3 1\nv 0 0 0\nv 1 0 0\nv 0 x 0\nt 0 1 2\n").unwrap();
        match read_mesh(&p) {
            Err(GdaipError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "mesh 3 2\nv 0 0 0\nv 1 0 0\nv 0 1 0\nt 0 1 2\n").unwrap();
        assert!(matches!(read_mesh(&p), Err(GdaipError::Parse { .. })));
    }

    #[test]
    fn graph_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.graph");
        let adj = crate::mesh_graph::build_adjacency(&icosphere(1).unwrap());
        write_graph(&p, &adj).unwrap();
        assert_eq!(read_graph(&p).unwrap(), adj);
    }

    #[test]
    fn labels_reject_out_of_range() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("l.txt");
        fs::write(&p, "0\n1\n5\n").unwrap();
        assert_eq!(read_labels(&p, None).unwrap().n_roi(), 6);
        match read_labels(&p, Some(3)) {
            Err(GdaipError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "0\n-1\n").unwrap();
        assert!(matches!(read_labels(&p, None), Err(GdaipError::Parse { line: 2, .. })));
    }

    #[test]
    fn time_series_bad_magic_names_offset() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ts.tsf");
        let ts = TimeSeriesMatrix::new(Array2::from_shape_fn((4, 3), |(t, v)| (t + 2 * v) as f64 * 0.25)).unwrap();
        write_time_series(&p, &ts).unwrap();
        assert_eq!(read_time_series(&p).unwrap(), ts);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_time_series(&p), Err(GdaipError::Format { offset: 0, .. })));
        bytes[0] = b'T';
        bytes.truncate(bytes.len() - 2);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_time_series(&p), Err(GdaipError::Format { .. })));
    }

    #[test]
    fn matrix_round_trip_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.mat");
        let m = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 + 0.1).powi(j as i32) / 7.0);
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.gdpc");
        let dims = ModelDims {
            in_dim: 3,
            heads: 2,
            head_dim: 4,
            n_roi: 3,
            tau: 0.05,
        };
        let params = ModelParams::init(dims, 11).unwrap();
        write_checkpoint(&p, &params).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back, params);
        assert_eq!(checkpoint_bytes(&back).unwrap(), fs::read(&p).unwrap());
        let mut bytes = fs::read(&p).unwrap();
        bytes.push(0);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(GdaipError::Format { .. })));
    }

    #[test]
    fn train_config_round_trip_and_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("train.cfg");
        let cfg = TrainConfig {
            steps: 12,
            lambda_mme: 1.0,
            seed: 99,
            ..TrainConfig::default()
        };
        write_train_config(&p, &cfg).unwrap();
        assert_eq!(read_train_config(&p).unwrap(), cfg);
        fs::write(&p, "# comment\nsteps = 5\nbogus = 1\n").unwrap();
        assert!(matches!(read_train_config(&p), Err(GdaipError::Parse { line: 3, .. })));
        fs::write(&p, "steps = five\n").unwrap();
        assert!(matches!(read_train_config(&p), Err(GdaipError::Parse { line: 1, .. })));
    }

    #[test]
    fn history_csv_layout() {
        let history = TrainHistory {
            records: vec![
                StepRecord {
                    step: 0,
                    lr: 0.01,
                    cls_loss: 2.5,
                    ent_loss: f64::NAN,
                    val_dice: None,
                },
                StepRecord {
                    step: 1,
                    lr: 0.01,
                    cls_loss: 2.0,
                    ent_loss: 1.0,
                    val_dice: Some(0.5),
                },
            ],
        };
        assert_eq!(
            history_to_csv(&history),
            "step,lr,cls_loss,ent_loss,val_dice\n0,0.01,2.5,,\n1,0.01,2,1,0.5\n"
        );
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("sub").join("x.txt");
        atomic_write(&p, b"abc").unwrap();
        atomic_write(&p, b"def").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"def");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
