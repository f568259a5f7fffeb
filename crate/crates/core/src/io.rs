//! File formats: dataset and checkpoint JSON, loss and prediction CSV,
//! metric JSON.
//!
//! Dataset JSON layout:
//!
//! ```text
//! { "mesh": { "coords": [[x, y], ...], "elements": [[i, j, k, l], ...],
//!             "gamma_u": [i, ...], "gamma_t": [i, ...] },
//!   "simulations": [ { "u": [[ux, uy], ...], "y": [[...], ...],
//!                      "meta": { "key": value } } ] }
//! ```
//!
//! Arrays are row-major, one inner array per node or element.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::infer::{MetricReport, PredictiveField};
use crate::mesh::{Dataset, Mesh, Simulation};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::Tensor;
use crate::train::EpochRecord;

pub const CHECKPOINT_FORMAT: &str = "vgnn-checkpoint";
pub const CHECKPOINT_VERSION: u64 = 1;

fn rows_of(t: &Tensor) -> Value {
    Value::Array((0..t.rows()).map(|i| json!(t.row(i))).collect())
}

pub fn dataset_to_json(ds: &Dataset) -> Value {
    let m = &ds.mesh;
    let d = m.dim();
    let coords: Vec<&[f64]> = m.coords().chunks(d).collect();
    let sims: Vec<Value> = ds
        .simulations
        .iter()
        .map(|s| json!({ "u": rows_of(&s.u), "y": rows_of(&s.y), "meta": s.meta }))
        .collect();
    json!({
        "mesh": {
            "coords": coords,
            "elements": m.elements(),
            "gamma_u": m.gamma_u(),
            "gamma_t": m.gamma_t(),
        },
        "simulations": sims,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::schema(format!("{path}.{key}"), "missing field"))
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::schema(path, "expected an object"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::schema(path, "expected an array"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::schema(path, "expected a number"))
}

fn as_index(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::schema(path, "expected a non-negative integer"))
}

fn index_list(v: &Value, path: &str) -> Result<Vec<usize>> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, x)| as_index(x, &format!("{path}[{i}]")))
        .collect()
}

/// Rows of equal width; returns `(rows, width, flat data)`.
fn matrix(v: &Value, path: &str, width: Option<usize>) -> Result<(usize, usize, Vec<f64>)> {
    let rows = as_array(v, path)?;
    let mut data = Vec::new();
    let mut w = width;
    for (i, r) in rows.iter().enumerate() {
        let rp = format!("{path}[{i}]");
        let r = as_array(r, &rp)?;
        match w {
            None => w = Some(r.len()),
            Some(expected) if expected != r.len() => {
                return Err(Error::schema(rp, format!("expected {expected} entries, found {}", r.len())));
            }
            _ => {}
        }
        for (j, x) in r.iter().enumerate() {
            let x = as_f64(x, &format!("{rp}[{j}]"))?;
            data.push(x);
        }
    }
    Ok((rows.len(), w.unwrap_or(0), data))
}

pub fn dataset_from_json(v: &Value) -> Result<Dataset> {
    let root = as_object(v, "$")?;
    let mesh_v = as_object(field(root, "mesh", "$")?, "$.mesh")?;
    let (n, dim, coords) = matrix(field(mesh_v, "coords", "$.mesh")?, "$.mesh.coords", None)?;
    if dim != 2 && dim != 3 {
        return Err(Error::schema("$.mesh.coords", format!("rows must have 2 or 3 entries, found {dim}")));
    }
    let elements = as_array(field(mesh_v, "elements", "$.mesh")?, "$.mesh.elements")?
        .iter()
        .enumerate()
        .map(|(e, el)| index_list(el, &format!("$.mesh.elements[{e}]")))
        .collect::<Result<Vec<_>>>()?;
    let gamma_u = index_list(field(mesh_v, "gamma_u", "$.mesh")?, "$.mesh.gamma_u")?;
    let gamma_t = index_list(field(mesh_v, "gamma_t", "$.mesh")?, "$.mesh.gamma_t")?;
    let mesh = Mesh::new(dim, coords, elements, gamma_u, gamma_t)
        .map_err(|e| Error::schema("$.mesh", e.to_string()))?;

    let mut sims = Vec::new();
    let mut target_width = None;
    for (k, s) in as_array(field(root, "simulations", "$")?, "$.simulations")?.iter().enumerate() {
        let p = format!("$.simulations[{k}]");
        let obj = as_object(s, &p)?;
        let (nu, _, u) = matrix(field(obj, "u", &p)?, &format!("{p}.u"), Some(dim))?;
        if nu != n {
            return Err(Error::schema(format!("{p}.u"), format!("expected {n} rows, found {nu}")));
        }
        let (ny, t, y) = matrix(field(obj, "y", &p)?, &format!("{p}.y"), target_width)?;
        if ny != n {
            return Err(Error::schema(format!("{p}.y"), format!("expected {n} rows, found {ny}")));
        }
        target_width = Some(t);
        let mut meta = BTreeMap::new();
        if let Some(m) = obj.get("meta") {
            for (key, val) in as_object(m, &format!("{p}.meta"))? {
                meta.insert(key.clone(), as_f64(val, &format!("{p}.meta.{key}"))?);
            }
        }
        sims.push(Simulation {
            u: Tensor::matrix(n, dim, u)?,
            y: Tensor::matrix(n, t, y)?,
            meta,
        });
    }
    Dataset::new(mesh, sims).map_err(|e| Error::schema("$.simulations", e.to_string()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let text = serde_json::to_string(&dataset_to_json(ds))?;
    write_text(path.as_ref(), &(text + "\n"))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_json(&read_json(path.as_ref())?)
}

/// Loads a dataset converted offline into the dataset JSON layout.
pub fn import_external_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(path)
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u64,
    model: ModelConfig,
    params: BTreeMap<String, StoredTensor>,
}

pub fn checkpoint_to_json(state: &ModelState) -> Result<Value> {
    let params = state
        .params
        .iter()
        .map(|(name, t)| {
            (
                name.to_string(),
                StoredTensor {
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                },
            )
        })
        .collect();
    Ok(serde_json::to_value(Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: state.config.clone(),
        params,
    })?)
}

pub fn checkpoint_from_json(v: Value) -> Result<ModelState> {
    let ck: Checkpoint = serde_json::from_value(v).map_err(|e| Error::schema("$", e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::schema(
            "$.format",
            format!("unsupported checkpoint {} v{}", ck.format, ck.version),
        ));
    }
    let mut state = ModelState::init(ck.model, 0)?;
    if ck.params.len() != state.params.len() {
        return Err(Error::schema(
            "$.params",
            format!("expected {} tensors, found {}", state.params.len(), ck.params.len()),
        ));
    }
    for (name, st) in ck.params {
        let t = Tensor::new(st.shape, st.values).map_err(|e| Error::schema(format!("$.params.{name}"), e.to_string()))?;
        state.params.assign(&name, t)?;
    }
    Ok(state)
}

pub fn write_checkpoint(path: impl AsRef<Path>, state: &ModelState) -> Result<()> {
    write_json(path.as_ref(), &checkpoint_to_json(state)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    checkpoint_from_json(read_json(path.as_ref())?)
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,total,nll,kl,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.total, r.nll, r.kl, r.lr);
    }
    s
}

pub fn write_loss_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    write_text(path.as_ref(), &loss_csv(history))
}

/// One row per node: id, coordinates, then truth, mean, s_a, s_e, lower and
/// upper for each target component.
pub fn prediction_csv(mesh: &Mesh, field: &PredictiveField, truth: &Tensor) -> Result<String> {
    if field.mean.shape() != truth.shape() || truth.rows() != mesh.n_nodes() {
        return Err(Error::shape("prediction csv", field.mean.shape(), truth.shape()));
    }
    let t = truth.cols();
    let axes = ["x", "y", "z"];
    let mut header = vec!["id".to_string()];
    header.extend(axes[..mesh.dim()].iter().map(|a| a.to_string()));
    for col in ["truth", "mean", "s_a", "s_e", "lower", "upper"] {
        for c in 0..t {
            header.push(if t == 1 { col.to_string() } else { format!("{col}_{c}") });
        }
    }
    let mut s = header.join(",");
    s.push('\n');
    for i in 0..mesh.n_nodes() {
        let mut row = vec![i.to_string()];
        row.extend(mesh.coord(i).iter().map(f64::to_string));
        for src in [truth, &field.mean, &field.s_aleatoric, &field.s_epistemic, &field.lower, &field.upper] {
            row.extend(src.row(i).iter().map(f64::to_string));
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn write_metrics(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    write_json(path.as_ref(), &serde_json::to_value(report)?)
}
