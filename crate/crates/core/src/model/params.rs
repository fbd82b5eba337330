use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Indices of one per-lag encoder network in the flat parameter list.
#[derive(Clone, Debug)]
pub(crate) struct EncoderIdx {
    /// Weights for earlier lags' samples; absent for the first lag.
    pub w_samples: Option<usize>,
    pub w_history: usize,
    pub w_alpha: usize,
    pub b_hidden: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Positions of every named tensor, derived from the config alone.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub encoders: Vec<EncoderIdx>,
    pub alpha: Option<usize>,
    pub beta: Option<usize>,
    pub g_source: usize,
    pub g_beta: Option<usize>,
    pub g_bias: usize,
    pub agg_w1: usize,
    pub agg_b1: usize,
    pub agg_w2: usize,
    pub agg_b2: usize,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f64 },
    Normal(f64),
}

fn plan(config: &ModelConfig) -> (Vec<Spec>, Layout) {
    let m = config.vars;
    let k = config.max_lag;
    let h = config.effect_width;
    let eh = config.encoder_hidden;
    let ah = config.aggregator_hidden;
    let d = config.domains.len();
    let gca = config.kind == ModelKind::Gca;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };

    let mut encoders = Vec::new();
    let (mut alpha, mut beta, mut g_beta) = (None, None, None);
    if gca {
        alpha = Some(push("alpha".into(), vec![d, config.alpha_dim], Init::Normal(0.5)));
        beta = Some(push("beta".into(), vec![d, config.beta_dim], Init::Normal(0.5)));
        let fan_in = k * m * m + k * m + config.alpha_dim;
        for j in 0..k {
            let p = format!("encoder.{}", j + 1);
            let w_samples = (j > 0).then(|| {
                push(
                    format!("{p}.w_samples"),
                    vec![j * m * m, eh],
                    Init::Scaled { fan_in, gain: 1.0 },
                )
            });
            let w_history = push(
                format!("{p}.w_history"),
                vec![k * m, eh],
                Init::Scaled { fan_in, gain: 1.0 },
            );
            let w_alpha = push(
                format!("{p}.w_alpha"),
                vec![config.alpha_dim, eh],
                Init::Scaled { fan_in, gain: 1.0 },
            );
            let b_hidden = push(format!("{p}.b_hidden"), vec![eh], Init::Zero);
            let w_out = push(
                format!("{p}.w_out"),
                vec![eh, m * m],
                Init::Scaled { fan_in: eh, gain: 0.5 },
            );
            let b_out = push(format!("{p}.b_out"), vec![m * m], Init::Zero);
            encoders.push(EncoderIdx {
                w_samples,
                w_history,
                w_alpha,
                b_hidden,
                w_out,
                b_out,
            });
        }
    }
    let g_source = push(
        "intra.w_source".into(),
        vec![m, m, h],
        Init::Scaled { fan_in: m, gain: 1.0 },
    );
    if gca {
        g_beta = Some(push(
            "intra.w_beta".into(),
            vec![m, config.beta_dim, h],
            Init::Scaled {
                fan_in: config.beta_dim,
                gain: 0.5,
            },
        ));
    }
    let g_bias = push("intra.bias".into(), vec![m, 1, h], Init::Zero);
    let agg_w1 = push(
        "inter.w_hidden".into(),
        vec![k * h, ah],
        Init::Scaled {
            fan_in: k * h,
            gain: 1.0,
        },
    );
    let agg_b1 = push("inter.b_hidden".into(), vec![ah], Init::Zero);
    let agg_w2 = push(
        "inter.w_out".into(),
        vec![ah, 1],
        Init::Scaled { fan_in: ah, gain: 1.0 },
    );
    let agg_b2 = push("inter.b_out".into(), vec![1], Init::Zero);
    let layout = Layout {
        encoders,
        alpha,
        beta,
        g_source,
        g_beta,
        g_bias,
        agg_w1,
        agg_b1,
        agg_w2,
        agg_b2,
    };
    (specs, layout)
}

/// All learnable state of a model, as an ordered list of named tensors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ParamsRecord", into = "ParamsRecord")]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = plan(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let values: Vec<f64> = match spec.init {
                Init::Zero => vec![0.0; n],
                Init::Scaled { fan_in, gain } => {
                    let dist = Normal::new(0.0, gain / (fan_in.max(1) as f64).sqrt())
                        .expect("positive std");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
                Init::Normal(sd) => {
                    let dist = Normal::new(0.0, sd).expect("positive std");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            let mut t = Tensor::new(spec.shape, values)?;
            if spec.name.starts_with("encoder.") && spec.name.ends_with(".b_out") {
                t.values_mut()
                    .iter_mut()
                    .for_each(|v| *v = config.encoder_bias_init);
            }
            names.push(spec.name);
            tensors.push(t.with_grad());
        }
        Ok(Self {
            config,
            names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Row of the embedding tables used for `domain_id`.
    pub fn domain_index(&self, domain_id: usize) -> Result<usize> {
        self.config
            .domains
            .iter()
            .position(|&d| d == domain_id)
            .ok_or(Error::UnknownDomain(domain_id))
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.variable(t.clone()))
            .collect();
        BoundParams {
            params: self,
            vars,
            tape: tape.clone(),
        }
    }

    /// Uses caller-provided tape values (one per tensor, same shapes) in
    /// place of the stored parameters.
    pub fn bind_with(&self, vars: Vec<Var>) -> Result<BoundParams<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter values, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        for (v, t) in vars.iter().zip(&self.tensors) {
            if v.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "bind_with",
                    lhs: v.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let tape = vars[0].tape().clone();
        Ok(BoundParams {
            params: self,
            vars,
            tape,
        })
    }

    /// Per-domain (alpha, beta) rows keyed by domain id.
    pub fn domain_embeddings(&self) -> Vec<DomainEmbedding> {
        let (Some(a), Some(b)) = (self.layout.alpha, self.layout.beta) else {
            return Vec::new();
        };
        let (da, db) = (self.config.alpha_dim, self.config.beta_dim);
        self.config
            .domains
            .iter()
            .enumerate()
            .map(|(row, &domain_id)| DomainEmbedding {
                domain_id,
                alpha: self.tensors[a].values()[row * da..(row + 1) * da].to_vec(),
                beta: self.tensors[b].values()[row * db..(row + 1) * db].to_vec(),
            })
            .collect()
    }
}

/// Parameters registered on one tape.
pub struct BoundParams<'a> {
    pub(crate) params: &'a ModelParams,
    pub(crate) vars: Vec<Var>,
    pub(crate) tape: Tape,
}

impl<'a> BoundParams<'a> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn var(&self, idx: usize) -> &Var {
        &self.vars[idx]
    }
}

/// Structure code `alpha` and strength code `beta` for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEmbedding {
    pub domain_id: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
    #[serde(default)]
    domain_embeddings: Vec<DomainEmbedding>,
}

impl From<ModelParams> for ParamsRecord {
    fn from(p: ModelParams) -> Self {
        let domain_embeddings = p.domain_embeddings();
        let tensors = p
            .names
            .into_iter()
            .zip(p.tensors)
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.into_values(),
            })
            .collect();
        ParamsRecord {
            config: p.config,
            tensors,
            domain_embeddings,
        }
    }
}

impl TryFrom<ParamsRecord> for ModelParams {
    type Error = String;

    fn try_from(rec: ParamsRecord) -> std::result::Result<Self, String> {
        rec.config.validate().map_err(|e| e.to_string())?;
        let (specs, layout) = plan(&rec.config);
        if specs.len() != rec.tensors.len() {
            return Err(format!(
                "expected {} tensors for this config, found {}",
                specs.len(),
                rec.tensors.len()
            ));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (spec, t) in specs.into_iter().zip(rec.tensors) {
            if spec.name != t.name || spec.shape != t.shape {
                return Err(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, spec.name, spec.shape
                ));
            }
            let tensor = Tensor::new(t.shape, t.values).map_err(|e| e.to_string())?;
            if !tensor.all_finite() {
                return Err(format!("tensor {} has non-finite values", t.name));
            }
            names.push(t.name);
            tensors.push(tensor.with_grad());
        }
        Ok(ModelParams {
            config: rec.config,
            names,
            tensors,
            layout,
        })
    }
}
