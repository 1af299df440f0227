use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::dense::Dense;
use super::hyper::HnFdnnModel;
use super::mlp::{Mlp, MlpSpec};
use crate::error::{Error, Result};

pub const RESHAPE_CONVENTION: &str = "row-major-wb";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    HnFdnn,
    Mlp,
}

/// On-disk form of a network. Parameter tensors are named `main.W{g}`,
/// `main.b{g}`, `hn.W{l}`, `hn.b{l}` with layer numbers counted from 1 at the
/// input, so the first weight tensor is `W2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub spec: MlpSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hn_spec: Option<MlpSpec>,
    pub reshape_convention: String,
    pub params: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamState>,
}

fn put_layers(params: &mut BTreeMap<String, Vec<f64>>, prefix: &str, layers: &[Dense]) {
    for (i, l) in layers.iter().enumerate() {
        params.insert(format!("{prefix}.W{}", i + 2), l.weights.clone());
        params.insert(format!("{prefix}.b{}", i + 2), l.bias.clone());
    }
}

fn take_layers(params: &BTreeMap<String, Vec<f64>>, prefix: &str, layers: &mut [Dense]) -> Result<()> {
    for (i, l) in layers.iter_mut().enumerate() {
        for (name, dst) in [("W", &mut l.weights), ("b", &mut l.bias)] {
            let key = format!("{prefix}.{name}{}", i + 2);
            let src = params.get(&key).ok_or_else(|| Error::dim(format!("checkpoint lacks tensor {key}")))?;
            if src.len() != dst.len() {
                return Err(Error::dim(format!(
                    "tensor {key} has {} values, the network expects {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_hn(model: &HnFdnnModel, adam: Option<&AdamState>) -> Self {
        let mut params = BTreeMap::new();
        put_layers(&mut params, "main", &model.trunk);
        put_layers(&mut params, "hn", &model.hn.layers);
        Checkpoint {
            kind: ModelKind::HnFdnn,
            spec: model.main_spec.clone(),
            hn_spec: Some(model.hn.spec.clone()),
            reshape_convention: RESHAPE_CONVENTION.to_string(),
            params,
            meta: BTreeMap::new(),
            adam: adam.cloned(),
        }
    }

    pub fn from_mlp(model: &Mlp, adam: Option<&AdamState>) -> Self {
        let mut params = BTreeMap::new();
        put_layers(&mut params, "main", &model.layers);
        Checkpoint {
            kind: ModelKind::Mlp,
            spec: model.spec.clone(),
            hn_spec: None,
            reshape_convention: RESHAPE_CONVENTION.to_string(),
            params,
            meta: BTreeMap::new(),
            adam: adam.cloned(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.as_f64())
    }

    fn check_spec(&self, expected: Option<&MlpSpec>) -> Result<()> {
        if self.reshape_convention != RESHAPE_CONVENTION {
            return Err(Error::invalid(format!("unsupported reshape convention {:?}", self.reshape_convention)));
        }
        if let Some(e) = expected {
            if e != &self.spec {
                return Err(Error::dim(format!(
                    "checkpoint holds a {} network, expected {}",
                    self.spec.describe(),
                    e.describe()
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds the hypernetwork model, optionally requiring a main spec.
    pub fn to_hn(&self, expected: Option<&MlpSpec>) -> Result<HnFdnnModel> {
        self.check_spec(expected)?;
        if self.kind != ModelKind::HnFdnn {
            return Err(Error::invalid("checkpoint does not hold a hypernetwork model"));
        }
        let hn_spec = self.hn_spec.clone().ok_or_else(|| Error::invalid("checkpoint lacks hn_spec"))?;
        let mut model = HnFdnnModel::zeros(self.spec.clone(), hn_spec).map_err(|e| Error::dim(e.to_string()))?;
        take_layers(&self.params, "main", &mut model.trunk)?;
        take_layers(&self.params, "hn", &mut model.hn.layers)?;
        self.check_adam(&model)?;
        Ok(model)
    }

    pub fn to_mlp(&self, expected: Option<&MlpSpec>) -> Result<Mlp> {
        self.check_spec(expected)?;
        if self.kind != ModelKind::Mlp {
            return Err(Error::invalid("checkpoint does not hold a plain MLP"));
        }
        let mut model = Mlp::zeros(self.spec.clone()).map_err(|e| Error::dim(e.to_string()))?;
        take_layers(&self.params, "main", &mut model.layers)?;
        self.check_adam(&model)?;
        Ok(model)
    }

    fn check_adam<T: super::Trainable>(&self, model: &T) -> Result<()> {
        if let Some(a) = &self.adam {
            let sizes: Vec<usize> = model.param_tensors().iter().map(|t| t.len()).collect();
            let fits = |acc: &Vec<Vec<f64>>| acc.len() == sizes.len() && acc.iter().zip(&sizes).all(|(t, s)| t.len() == *s);
            if !fits(&a.m) || !fits(&a.v) {
                return Err(Error::dim("optimizer state does not match the network".to_string()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
    }
}
