//! Model files: a JSON document holding the format version, model kind,
//! hyperparameters and every parameter tensor as `{name, shape, data}`.
//!
//! Scalars are written with 17 significant digits and parsed back with the
//! standard library's correctly-rounded parser, so `load(save(m)) == m`
//! bit-for-bit for `f64` (and for `f32`, whose values widen exactly).

use std::path::Path;

use serde_json::{json, Map, Number, Value};

use crate::diff::Tensor;
use crate::model::{BaselineConfig, BaselineModel, DecoderParams, DecoderWeights, EncoderNet, Linear,
    MarginalParams, Model, ModelError, VibConfig, VibModel};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u64 = 1;

type Result<V> = std::result::Result<V, ModelError>;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

fn exact_number(x: f64) -> Result<Value> {
    if !x.is_finite() {
        return Err(ModelError::Validation(format!("cannot store non-finite value {}", x)));
    }
    Ok(Value::Number(Number::from_string_unchecked(format!("{:.16e}", x))))
}

fn read_number(v: &Value, what: &str) -> Result<f64> {
    match v {
        Value::Number(n) => n
            .as_str()
            .parse::<f64>()
            .map_err(|_| bad(format!("{} is not a number", what))),
        _ => Err(bad(format!("{} must be a number", what))),
    }
}

fn tensor_value<T: Scalar>(name: &str, t: &Tensor<T>) -> Result<Value> {
    let data = t
        .data()
        .iter()
        .map(|x| exact_number(x.as_f64()))
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "name": name, "shape": t.shape(), "data": data }))
}

pub fn to_json<T: Scalar>(model: &Model<T>) -> Result<Value> {
    let (hyper, params) = match model {
        Model::Vib(m) => {
            m.validate()?;
            let c = &m.config;
            let hyper = json!({
                "input_dim": c.input_dim,
                "hidden": c.hidden,
                "latent_dim": c.latent_dim,
                "marginal_components": c.marginal_components,
                "decoder_components": c.decoder_components,
                "class_count": c.class_count,
                "beta": exact_number(c.beta)?,
                "decoder_weights": c.decoder_weights,
            });
            (hyper, m.named_params())
        }
        Model::Baseline(m) => {
            let c = &m.config;
            let hyper = json!({
                "input_dim": c.input_dim,
                "hidden": c.hidden,
                "class_count": c.class_count,
            });
            (hyper, m.named_params())
        }
    };
    let params = params
        .iter()
        .map(|(n, t)| tensor_value(n, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "version": FORMAT_VERSION,
        "kind": model.kind(),
        "scalar": T::NAME,
        "hyperparameters": hyper,
        "params": params,
    }))
}

pub fn to_string<T: Scalar>(model: &Model<T>) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&to_json(model)?).map_err(|e| bad(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_string(model)?).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| bad(format!("missing field `{}`", key)))
}

fn usize_field(obj: &Map<String, Value>, key: &str) -> Result<usize> {
    field(obj, key)?
        .as_str_number()
        .ok_or_else(|| bad(format!("`{}` must be a non-negative integer", key)))
}

trait AsUsize {
    fn as_str_number(&self) -> Option<usize>;
}

impl AsUsize for Value {
    fn as_str_number(&self) -> Option<usize> {
        match self {
            Value::Number(n) => n.as_str().parse::<usize>().ok(),
            _ => None,
        }
    }
}

fn hidden_field(obj: &Map<String, Value>) -> Result<Vec<usize>> {
    field(obj, "hidden")?
        .as_array()
        .ok_or_else(|| bad("`hidden` must be a list"))?
        .iter()
        .map(|v| v.as_str_number().ok_or_else(|| bad("`hidden` entries must be integers")))
        .collect()
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn parse_params(v: &Value) -> Result<Vec<RawTensor>> {
    let list = v.as_array().ok_or_else(|| bad("`params` must be a list"))?;
    list.iter()
        .enumerate()
        .map(|(i, p)| {
            let obj = p.as_object().ok_or_else(|| bad(format!("params[{}] must be an object", i)))?;
            let name = field(obj, "name")?
                .as_str()
                .ok_or_else(|| bad(format!("params[{}].name must be a string", i)))?
                .to_string();
            let shape = field(obj, "shape")?
                .as_array()
                .ok_or_else(|| bad(format!("{}: shape must be a list", name)))?
                .iter()
                .map(|s| s.as_str_number().ok_or_else(|| bad(format!("{}: bad shape entry", name))))
                .collect::<Result<Vec<_>>>()?;
            let data = field(obj, "data")?
                .as_array()
                .ok_or_else(|| bad(format!("{}: data must be a list", name)))?
                .iter()
                .map(|x| read_number(x, &name))
                .collect::<Result<Vec<_>>>()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(ModelError::Validation(format!(
                    "{}: shape {:?} does not match {} values",
                    name,
                    shape,
                    data.len()
                )));
            }
            Ok(RawTensor { name, shape, data })
        })
        .collect()
}

/// Checks names and shapes against `expected` and converts to tensors.
fn take_params<T: Scalar>(raw: Vec<RawTensor>, expected: &[(String, Vec<usize>)]) -> Result<Vec<Tensor<T>>> {
    if raw.len() != expected.len() {
        return Err(ModelError::Validation(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            raw.len()
        )));
    }
    raw.into_iter()
        .zip(expected)
        .map(|(r, (name, shape))| {
            if &r.name != name || &r.shape != shape {
                return Err(ModelError::Validation(format!(
                    "{} should have shape {:?}, found {} with shape {:?}",
                    name, shape, r.name, r.shape
                )));
            }
            Ok(Tensor::from_f64(&r.shape, &r.data)?)
        })
        .collect()
}

fn linear<T>(it: &mut impl Iterator<Item = Tensor<T>>) -> Linear<T> {
    let weight = it.next().expect("counted");
    let bias = it.next().expect("counted");
    Linear { weight, bias }
}

pub fn from_json<T: Scalar>(doc: &Value) -> Result<Model<T>> {
    let root = doc.as_object().ok_or_else(|| bad("top level must be an object"))?;
    let version = field(root, "version")?
        .as_str_number()
        .ok_or_else(|| bad("`version` must be an integer"))? as u64;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version(version));
    }
    let kind = field(root, "kind")?.as_str().ok_or_else(|| bad("`kind` must be a string"))?;
    let hyper = field(root, "hyperparameters")?
        .as_object()
        .ok_or_else(|| bad("`hyperparameters` must be an object"))?;
    let raw = parse_params(field(root, "params")?)?;
    match kind {
        "vib" => {
            let decoder_weights: DecoderWeights = serde_json::from_value(field(hyper, "decoder_weights")?.clone())
                .map_err(|e| bad(format!("decoder_weights: {}", e)))?;
            let config = VibConfig {
                input_dim: usize_field(hyper, "input_dim")?,
                hidden: hidden_field(hyper)?,
                latent_dim: usize_field(hyper, "latent_dim")?,
                marginal_components: usize_field(hyper, "marginal_components")?,
                decoder_components: usize_field(hyper, "decoder_components")?,
                class_count: usize_field(hyper, "class_count")?,
                beta: read_number(field(hyper, "beta")?, "beta")?,
                decoder_weights,
            };
            config.validate()?;
            let expected = VibModel::<T>::expected_shapes(&config);
            let mut it = take_params::<T>(raw, &expected)?.into_iter();
            let trunk = (0..config.hidden.len()).map(|_| linear(&mut it)).collect();
            let head = linear(&mut it);
            let mut next = || it.next().expect("counted");
            let marginal = MarginalParams {
                weight_logits: next(),
                means: next(),
                raw_diag: next(),
                off_diag: next(),
            };
            let mix_weight = match config.decoder_weights {
                DecoderWeights::Affine => Some(next()),
                DecoderWeights::Constant => None,
            };
            let decoder = DecoderParams {
                mix_weight,
                mix_bias: next(),
                comp_weight: next(),
                comp_bias: next(),
            };
            let model = VibModel {
                config,
                encoder: EncoderNet { trunk, head },
                marginal,
                decoder,
            };
            model.validate()?;
            Ok(Model::Vib(model))
        }
        "baseline" => {
            let config = BaselineConfig {
                input_dim: usize_field(hyper, "input_dim")?,
                hidden: hidden_field(hyper)?,
                class_count: usize_field(hyper, "class_count")?,
            };
            let expected = BaselineModel::<T>::expected_shapes(&config);
            let mut it = take_params::<T>(raw, &expected)?.into_iter();
            let trunk = (0..config.hidden.len()).map(|_| linear(&mut it)).collect();
            let head = linear(&mut it);
            Ok(Model::Baseline(BaselineModel { config, trunk, head }))
        }
        other => Err(bad(format!("unknown model kind `{}`", other))),
    }
}

pub fn from_str<T: Scalar>(text: &str) -> Result<Model<T>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    from_json(&doc)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_str(&text)
}
