//! Versioned JSON persistence of fitted models.
//!
//! Every float is written in decimal scientific notation with 17 significant
//! digits, which round-trips binary64 exactly, so `save(load(save(m)))` is
//! byte-identical to `save(m)`.

use std::path::Path;

use serde::ser::{SerializeSeq, Serializer};
use serde::Serialize;
use serde_json::value::RawValue;
use serde_json::{Map, Value};

use crate::arch::{Activation, Architecture, Monotonicity, Quadratic};
use crate::error::{PcfError, Result};
use crate::model::{PcfModel, Scaling};
use crate::psi::WeightVector;

pub const FORMAT_NAME: &str = "pcf-model";
pub const FORMAT_VERSION: u64 = 1;

struct Decimals<'a>(&'a [f64]);

impl Serialize for Decimals<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for v in self.0 {
            let raw =
                RawValue::from_string(format!("{v:.16e}")).map_err(serde::ser::Error::custom)?;
            seq.serialize_element(&raw)?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct ArchOut<'a> {
    n: usize,
    p: usize,
    d: usize,
    widths: &'a [usize],
    activation: Activation,
    psi_hidden: &'a [usize],
    psi_activation: Activation,
    monotonicity: &'a [Monotonicity],
    quadratic: Quadratic,
    scaling: bool,
}

#[derive(Serialize)]
struct ScalingOut<'a> {
    x_mean: Decimals<'a>,
    x_scale: Decimals<'a>,
    theta_mean: Decimals<'a>,
    theta_scale: Decimals<'a>,
    y_mean: Decimals<'a>,
    y_scale: Decimals<'a>,
}

#[derive(Serialize)]
struct FileOut<'a> {
    format: &'static str,
    version: u64,
    arch: ArchOut<'a>,
    scaling: Option<ScalingOut<'a>>,
    weights: Decimals<'a>,
}

/// Serializes `model` to its canonical JSON text (newline-terminated).
pub fn to_json(model: &PcfModel) -> String {
    let a = &model.arch;
    let file = FileOut {
        format: FORMAT_NAME,
        version: FORMAT_VERSION,
        arch: ArchOut {
            n: a.n,
            p: a.p,
            d: a.d,
            widths: &a.widths,
            activation: a.activation,
            psi_hidden: &a.psi_hidden,
            psi_activation: a.psi_activation,
            monotonicity: &a.monotonicity,
            quadratic: a.quadratic,
            scaling: a.scaling,
        },
        scaling: model.scaling.as_ref().map(|s| ScalingOut {
            x_mean: Decimals(&s.x_mean),
            x_scale: Decimals(&s.x_scale),
            theta_mean: Decimals(&s.theta_mean),
            theta_scale: Decimals(&s.theta_scale),
            y_mean: Decimals(&s.y_mean),
            y_scale: Decimals(&s.y_scale),
        }),
        weights: Decimals(model.weights.as_slice()),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("model serialization cannot fail");
    text.push('\n');
    text
}

pub fn save_model(model: &PcfModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PcfModel> {
    let text = std::fs::read_to_string(path)?;
    from_json(&text)
}

fn err(pointer: impl Into<String>, message: impl Into<String>) -> PcfError {
    PcfError::ModelFile {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, base: &str, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| err(format!("{base}/{key}"), "missing field"))
}

fn object<'a>(v: &'a Value, ptr: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| err(ptr, "expected an object"))
}

fn reject_unknown(obj: &Map<String, Value>, base: &str, known: &[&str]) -> Result<()> {
    match obj.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(err(format!("{base}/{k}"), "unknown field")),
        None => Ok(()),
    }
}

/// A dimension: integral and within `min..`. Negative values are reported
/// as dimension errors rather than type errors.
fn dim(v: &Value, ptr: &str, min: i64) -> Result<usize> {
    let n = v
        .as_i64()
        .ok_or_else(|| err(ptr, "expected an integer dimension"))?;
    if n < min {
        return Err(err(ptr, format!("invalid dimension {n}: must be >= {min}")));
    }
    Ok(n as usize)
}

fn dims(v: &Value, ptr: &str, min: i64) -> Result<Vec<usize>> {
    let arr = v
        .as_array()
        .ok_or_else(|| err(ptr, "expected an array of dimensions"))?;
    arr.iter()
        .enumerate()
        .map(|(i, e)| dim(e, &format!("{ptr}/{i}"), min))
        .collect()
}

fn floats(v: &Value, ptr: &str, expected: usize) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| err(ptr, "expected an array of numbers"))?;
    if arr.len() != expected {
        return Err(err(
            ptr,
            format!(
                "dimension mismatch: expected {expected} entries, got {}",
                arr.len()
            ),
        ));
    }
    arr.iter()
        .enumerate()
        .map(|(i, e)| match e.as_f64() {
            Some(x) if x.is_finite() => Ok(x),
            _ => Err(err(format!("{ptr}/{i}"), "expected a finite number")),
        })
        .collect()
}

fn enum_value<T: serde::de::DeserializeOwned>(v: &Value, ptr: &str) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| err(ptr, e.to_string()))
}

fn parse_arch(v: &Value) -> Result<Architecture> {
    let o = object(v, "/arch")?;
    reject_unknown(
        o,
        "/arch",
        &[
            "n",
            "p",
            "d",
            "widths",
            "activation",
            "psi_hidden",
            "psi_activation",
            "monotonicity",
            "quadratic",
            "scaling",
        ],
    )?;
    let n = dim(field(o, "/arch", "n")?, "/arch/n", 0)?;
    let p = dim(field(o, "/arch", "p")?, "/arch/p", 0)?;
    let d = dim(field(o, "/arch", "d")?, "/arch/d", 1)?;
    let widths = dims(field(o, "/arch", "widths")?, "/arch/widths", 1)?;
    if widths.is_empty() {
        return Err(err("/arch/widths", "at least one hidden layer is required"));
    }
    let psi_hidden = dims(field(o, "/arch", "psi_hidden")?, "/arch/psi_hidden", 1)?;
    let activation: Activation = enum_value(field(o, "/arch", "activation")?, "/arch/activation")?;
    let psi_activation: Activation =
        enum_value(field(o, "/arch", "psi_activation")?, "/arch/psi_activation")?;
    let monotonicity: Vec<Monotonicity> =
        enum_value(field(o, "/arch", "monotonicity")?, "/arch/monotonicity")?;
    if monotonicity.len() != n {
        return Err(err(
            "/arch/monotonicity",
            format!(
                "dimension mismatch: expected {n} entries, got {}",
                monotonicity.len()
            ),
        ));
    }
    let quadratic: Quadratic = enum_value(field(o, "/arch", "quadratic")?, "/arch/quadratic")?;
    let scaling = field(o, "/arch", "scaling")?
        .as_bool()
        .ok_or_else(|| err("/arch/scaling", "expected a boolean"))?;
    Architecture::builder(n, p, d)
        .widths(widths)
        .activation(activation)
        .psi_hidden(psi_hidden)
        .psi_activation(psi_activation)
        .monotonicity(monotonicity)
        .quadratic(quadratic)
        .scaling(scaling)
        .build()
        .map_err(|e| err("/arch", e.to_string()))
}

fn parse_scaling(v: &Value, arch: &Architecture) -> Result<Option<Scaling>> {
    if v.is_null() {
        return Ok(None);
    }
    let o = object(v, "/scaling")?;
    let keys = [
        "x_mean",
        "x_scale",
        "theta_mean",
        "theta_scale",
        "y_mean",
        "y_scale",
    ];
    reject_unknown(o, "/scaling", &keys)?;
    let get = |k: &str, len: usize| floats(field(o, "/scaling", k)?, &format!("/scaling/{k}"), len);
    let s = Scaling {
        x_mean: get("x_mean", arch.n)?,
        x_scale: get("x_scale", arch.n)?,
        theta_mean: get("theta_mean", arch.p)?,
        theta_scale: get("theta_scale", arch.p)?,
        y_mean: get("y_mean", arch.d)?,
        y_scale: get("y_scale", arch.d)?,
    };
    for k in ["x_scale", "theta_scale", "y_scale"] {
        let vals = match k {
            "x_scale" => &s.x_scale,
            "theta_scale" => &s.theta_scale,
            _ => &s.y_scale,
        };
        if let Some(i) = vals.iter().position(|v| *v <= 0.0) {
            return Err(err(format!("/scaling/{k}/{i}"), "scale must be positive"));
        }
    }
    Ok(Some(s))
}

/// Parses and validates a model document. Errors carry a JSON pointer to the
/// offending value.
pub fn from_json(text: &str) -> Result<PcfModel> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| err("", format!("malformed JSON: {e}")))?;
    let o = object(&doc, "")?;
    reject_unknown(o, "", &["format", "version", "arch", "scaling", "weights"])?;
    match field(o, "", "format")?.as_str() {
        Some(FORMAT_NAME) => {}
        _ => return Err(err("/format", format!("expected \"{FORMAT_NAME}\""))),
    }
    match field(o, "", "version")?.as_u64() {
        Some(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(err(
                "/version",
                format!("unsupported version {v}; this build reads version {FORMAT_VERSION}"),
            ))
        }
        None => return Err(err("/version", "expected an integer version")),
    }
    let arch = parse_arch(field(o, "", "arch")?)?;
    let scaling = parse_scaling(field(o, "", "scaling")?, &arch)?;
    if scaling.is_some() != arch.scaling {
        return Err(err("/scaling", "presence must match /arch/scaling"));
    }
    let weights = floats(field(o, "", "weights")?, "/weights", arch.weight_len())?;
    PcfModel::new(arch, WeightVector(weights), scaling).map_err(|e| err("", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_model(scaled: bool) -> PcfModel {
        let arch = Architecture::builder(2, 1, 1)
            .activation(Activation::Softplus)
            .quadratic(Quadratic::Full)
            .scaling(scaled)
            .build()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = WeightVector::init(&arch, &mut rng);
        let scaling = scaled.then(|| Scaling {
            x_mean: vec![0.1, -0.3],
            x_scale: vec![2.0, 1.0 / 3.0],
            theta_mean: vec![5.0],
            theta_scale: vec![0.7],
            y_mean: vec![1e-9],
            y_scale: vec![123.456],
        });
        PcfModel::new(arch, w, scaling).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for scaled in [false, true] {
            let m = sample_model(scaled);
            let text = to_json(&m);
            let back = from_json(&text).unwrap();
            assert_eq!(back, m);
            assert_eq!(to_json(&back), text);
        }
    }

    #[test]
    fn seventeen_significant_digits() {
        let m = sample_model(false);
        let text = to_json(&m);
        let first = text.split("\"weights\": [").nth(1).unwrap().trim_start();
        let num: String = first
            .chars()
            .take_while(|c| *c != ',' && *c != '\n')
            .collect();
        let mantissa = num.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(
            mantissa.chars().filter(char::is_ascii_digit).count(),
            17,
            "{num}"
        );
    }

    #[test]
    fn truncated_file_is_a_schema_error() {
        let text = to_json(&sample_model(false));
        let cut = &text[..text.len() / 2];
        match from_json(cut) {
            Err(PcfError::ModelFile { pointer, .. }) => assert_eq!(pointer, ""),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_width_is_a_dimension_error() {
        let text = to_json(&sample_model(false));
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["arch"]["widths"][1] = Value::from(-2);
        match from_json(&doc.to_string()) {
            Err(PcfError::ModelFile { pointer, message }) => {
                assert_eq!(pointer, "/arch/widths/1");
                assert!(message.contains("dimension"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_and_weight_errors_point_at_the_field() {
        let text = to_json(&sample_model(false));
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["version"] = Value::from(99);
        let e = from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(e, PcfError::ModelFile { ref pointer, .. } if pointer == "/version"));

        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["weights"][3] = Value::from("nan");
        let e = from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(e, PcfError::ModelFile { ref pointer, .. } if pointer == "/weights/3"));

        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["weights"].as_array_mut().unwrap().pop();
        let e = from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(e, PcfError::ModelFile { ref pointer, .. } if pointer == "/weights"));

        let mut doc: Value = serde_json::from_str(&text).unwrap();
        doc["arch"]["widht"] = Value::from(3);
        let e = from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(e, PcfError::ModelFile { ref pointer, .. } if pointer == "/arch/widht"));
    }
}
