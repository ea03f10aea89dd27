//! Named parameter storage, graph binding and the checkpoint directory format.
//!
//! A checkpoint is a directory holding one `JMT1` file per parameter
//! (`<name>.jmt`) and a `manifest.txt` with one `name d0xd1x...` line per
//! parameter in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{io, Gradients, Graph, Tensor, Var};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// A weight drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng));
    }

    /// Binds every parameter to `graph`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, t) in &self.tensors {
            io::save(t, &dir.join(format!("{name}.jmt")))?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name} {}\n", dims.join("x")));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = Self::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let bad = |detail: String| Error::Format {
                path: path.clone(),
                detail,
            };
            let (name, dims) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            let shape: Vec<usize> = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad extent in `{line}`"))))
                    .collect::<Result<_>>()?
            };
            let t = io::load(&dir.join(format!("{name}.jmt")))?;
            if t.shape() != shape {
                return Err(bad(format!("{name}: manifest says {shape:?}, file has {:?}", t.shape())));
            }
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Parameters of a [`ParamStore`] recorded on one graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'g>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn root(&self) -> Scope<'_, 'g> {
        Scope {
            bound: self,
            prefix: String::new(),
        }
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, 'g> {
        self.root().pp(prefix)
    }

    /// Gradient for every bound parameter, by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get(v)))
            .collect()
    }
}

/// A name prefix into a [`Bound`] set, in the style of `a.b.c`.
#[derive(Clone)]
pub struct Scope<'a, 'g> {
    bound: &'a Bound<'g>,
    prefix: String,
}

impl<'a, 'g> Scope<'a, 'g> {
    pub fn pp(&self, sub: &str) -> Scope<'a, 'g> {
        Scope {
            bound: self.bound,
            prefix: join(&self.prefix, sub),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.bound.get(&join(&self.prefix, name))
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.init_uniform("a.w", &[3, 2], 3, &mut rng);
        store.insert("a.b", Tensor::zeros(&[2]));
        store.insert("s", Tensor::scalar(0.5));
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest, "a.b 2\na.w 3x2\ns \n");
        let back = ParamStore::load(dir.path()).unwrap();
        for (name, t) in store.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(b.shape(), t.shape());
            assert!(b.max_abs_diff(t) < 1e-7);
        }
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.init_uniform("w", &[16, 4], 16, &mut ChaCha8Rng::seed_from_u64(9));
        b.init_uniform("w", &[16, 4], 16, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn scopes_resolve_dotted_names() {
        let mut store = ParamStore::new();
        store.insert("layer0.dir1.w", Tensor::ones(&[1]));
        let g = Graph::new();
        let bound = store.bind(&g, true);
        let s = bound.scope("layer0").pp("dir1");
        assert!(s.get("w").is_ok());
        assert!(matches!(s.get("v"), Err(Error::MissingParam(_))));
    }
}
