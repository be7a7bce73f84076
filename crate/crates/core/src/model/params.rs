//! Named parameter tensors, their initialisation and checkpoint directories.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{io, DType, Element, Graph, Rng, Shape, Tensor, Var};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal(0, 0.02) truncated at ±2σ.
    TruncNormal,
    /// Normal(0, √(2 / fan_out)) with `fan_out = kh·kw·c_out / groups`.
    ConvFanOut {
        fan_out: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Index of a parameter in its [`ParamLayout`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered list of parameter declarations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: impl Into<Shape>, init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec { name, shape: shape.into(), init });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.specs.iter().map(|s| s.shape.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Draws every parameter from its own stream, keyed by name.
    pub fn init<T: Element>(&self, seed: u64) -> ParamStore<T> {
        let values = self
            .specs
            .iter()
            .map(|s| match s.init {
                Init::TruncNormal => Rng::fork(seed, &s.name).trunc_normal_tensor(s.shape, INIT_STD),
                Init::ConvFanOut { fan_out } => {
                    let std = (2.0 / fan_out as f64).sqrt();
                    let mut rng = Rng::fork(seed, &s.name);
                    Tensor::from_fn(s.shape, |_| T::from_f64(std * rng.normal()))
                }
                Init::Zeros => Tensor::zeros(s.shape),
                Init::Ones => Tensor::ones(s.shape),
            })
            .collect();
        ParamStore { layout: self.clone(), values }
    }
}

/// Parameter values matching a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    layout: ParamLayout,
    values: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn from_values(layout: ParamLayout, values: Vec<Tensor<T>>) -> Result<Self> {
        if values.len() != layout.len() {
            return config_err(format!("{} values for {} parameters", values.len(), layout.len()));
        }
        for (spec, v) in layout.specs.iter().zip(&values) {
            if spec.shape != v.shape() {
                return config_err(format!(
                    "{}: expected shape {}, got {}",
                    spec.name,
                    spec.shape,
                    v.shape()
                ));
            }
        }
        Ok(ParamStore { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.find(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layout.find(name).map(|id| &mut self.values[id.0])
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Registers every parameter as a trainable leaf, in layout order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|v| g.param(v.clone())).collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { layout: self.layout.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }
}

/// `manifest.json` of a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub variant: String,
    pub seed: u64,
    pub dtype: DType,
    pub params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` plus one AXTF file per parameter.
pub fn save_checkpoint<T: Element>(
    dir: impl AsRef<Path>,
    variant: &str,
    seed: u64,
    store: &ParamStore<T>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.layout.len());
    for (spec, value) in store.layout.specs.iter().zip(&store.values) {
        let file = format!("{}.axtf", spec.name);
        io::save(value, dir.join(&file))?;
        params.push(ManifestEntry { name: spec.name.clone(), shape: spec.shape.0, file });
    }
    let manifest = Manifest { variant: variant.to_string(), seed, dtype: T::DTYPE, params };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a checkpoint into `layout`, checking names and shapes.
pub fn load_checkpoint<T: Element>(
    dir: impl AsRef<Path>,
    layout: &ParamLayout,
) -> Result<(Manifest, ParamStore<T>)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.params.len() != layout.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            manifest.params.len(),
            layout.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.len());
    for (spec, entry) in layout.specs.iter().zip(&manifest.params) {
        if spec.name != entry.name || spec.shape.0 != entry.shape {
            return Err(Error::Format(format!(
                "checkpoint entry {} {:?} does not match {} {}",
                entry.name, entry.shape, spec.name, spec.shape
            )));
        }
        let t: Tensor<T> = io::load(dir.join(&entry.file))?;
        if t.shape() != spec.shape {
            return Err(Error::Format(format!("{}: stored shape {}", entry.name, t.shape())));
        }
        values.push(t);
    }
    Ok((manifest, ParamStore::from_values(layout.clone(), values)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ParamLayout {
        let mut l = ParamLayout::new();
        l.add("a.weight", [1, 1, 3, 4], Init::TruncNormal);
        l.add("a.bias", [1, 1, 1, 4], Init::Zeros);
        l.add("n.weight", [1, 1, 1, 4], Init::Ones);
        l
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let l = layout();
        let a = l.init::<f64>(3);
        assert_eq!(a, l.init::<f64>(3));
        assert_ne!(a, l.init::<f64>(4));
        assert!(a.values()[0].data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        assert!(a.values()[1].data().iter().all(|&v| v == 0.0));
        assert!(a.values()[2].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn values_do_not_depend_on_declaration_order() {
        let mut l2 = ParamLayout::new();
        l2.add("x.weight", [1, 1, 2, 2], Init::TruncNormal);
        l2.add("a.weight", [1, 1, 3, 4], Init::TruncNormal);
        let a = layout().init::<f32>(9);
        let b = l2.init::<f32>(9);
        assert_eq!(a.by_name("a.weight"), b.by_name("a.weight"));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout();
        let store = l.init::<f32>(1);
        let m = save_checkpoint(dir.path(), "unit", 1, &store).unwrap();
        assert_eq!(m.params[0].name, "a.weight");
        let (m2, back) = load_checkpoint::<f32>(dir.path(), &l).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, store);
        let mut other = ParamLayout::new();
        other.add("a.weight", [1, 1, 3, 5], Init::Zeros);
        assert!(load_checkpoint::<f32>(dir.path(), &other).is_err());
    }
}
