use pdd_autograd::ops::power_iteration;
use pdd_autograd::{Graph, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamStore};
use crate::seeding::rng_for;
use crate::{PddError, Result};

const LRELU: f64 = 0.2;
const INIT_POWER_STEPS: usize = 10;

/// Anything that maps an NCHW image batch to real/fake logits inside a graph.
pub trait Critic {
    /// Adds the critic's parameters to `g`; trainable leaves only when `trainable`.
    fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound>;

    /// Logits for `x` (any shape with a leading batch dimension).
    fn logits<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Width of the first layer; later layers use 2x and 4x.
    pub channels: usize,
    #[serde(default = "default_true")]
    pub spectral_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { channels: 32, spectral_norm: true }
    }
}

/// Layer name, kernel, stride, padding.
const LAYERS: [(&str, usize, usize, usize); 5] =
    [("d0", 3, 1, 1), ("d1", 4, 2, 1), ("d2", 4, 2, 1), ("d3", 3, 1, 1), ("d4", 3, 1, 1)];

/// Five-layer strided patch critic; emits one logit per `4x4` output patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamStore,
    /// Power-iteration vectors `{layer}.u` / `{layer}.v` for spectral normalization.
    sn_state: ParamStore,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        if cfg.channels == 0 {
            return Err(PddError::Config("discriminator needs positive channels".into()));
        }
        let c = cfg.channels;
        let widths = [(3, c), (c, 2 * c), (2 * c, 4 * c), (4 * c, 4 * c), (4 * c, 1)];
        let mut rng = rng_for(seed, 0);
        let mut params = ParamStore::new();
        let mut sn_state = ParamStore::new();
        for (&(name, k, _, _), &(ci, co)) in LAYERS.iter().zip(&widths) {
            params.init_conv(&mut rng, name, ci, co, k, 1.0);
            let u: Vec<f32> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            sn_state.insert(format!("{name}.u"), Tensor::new(&[co], u)?);
            sn_state.insert(format!("{name}.v"), Tensor::zeros(&[ci * k * k]));
        }
        let mut d = Self { cfg: cfg.clone(), params, sn_state };
        for _ in 0..INIT_POWER_STEPS {
            d.power_iterate()?;
        }
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn sn_state(&self) -> &ParamStore {
        &self.sn_state
    }

    pub fn sn_state_mut(&mut self) -> &mut ParamStore {
        &mut self.sn_state
    }

    /// One power-iteration refinement of every layer's singular vectors.
    /// Only the trainer calls this; loss evaluation never mutates the critic.
    pub fn power_iterate(&mut self) -> Result<()> {
        if !self.cfg.spectral_norm {
            return Ok(());
        }
        for &(name, ..) in &LAYERS {
            let w: Vec<f64> = self.params.get(&format!("{name}.weight"))?.to_f64_vec();
            let mut u = self.sn_state.get(&format!("{name}.u"))?.to_f64_vec();
            let mut v = self.sn_state.get(&format!("{name}.v"))?.to_f64_vec();
            power_iteration(&w, &mut u, &mut v);
            *self.sn_state.get_mut(&format!("{name}.u"))? = Tensor::<f64>::from_f64(&[u.len()], &u)?.cast();
            *self.sn_state.get_mut(&format!("{name}.v"))? = Tensor::<f64>::from_f64(&[v.len()], &v)?.cast();
        }
        Ok(())
    }
}

impl Critic for Discriminator {
    fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let mut bound = self.params.bind(g, trainable);
        if self.cfg.spectral_norm {
            for &(name, ..) in &LAYERS {
                let key = format!("{name}.weight");
                let u = self.sn_state.get(&format!("{name}.u"))?.to_f64_vec();
                let v = self.sn_state.get(&format!("{name}.v"))?.to_f64_vec();
                let w = bound.var(&key)?;
                let normalized = g.spectral_normalize(w, &u, &v)?;
                bound.replace(&key, normalized);
            }
        }
        Ok(bound)
    }

    fn logits<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(name, _, stride, pad)) in LAYERS.iter().enumerate() {
            h = bound.conv(g, name, h, stride, pad)?;
            if i + 1 < LAYERS.len() {
                h = g.leaky_relu(h, LRELU);
            }
        }
        Ok(h)
    }
}
