//! Model parameters: the convolutional feature extractor, decoder layers
//! (temporal attention, context cross-attention, self-attention, FFN), the
//! visibility head and the global-matching fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Shape, Tape, Var};
use crate::config::{ContextUpdate, ModelConfig};
use crate::error::Result;
use crate::params::{identity, normal, ones, zeros, ParamStore};
use crate::tensorcore::{make_grid, Grid};

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Uniform ring of `m` offsets with the given radius, used to bias the
/// offset head so early training samples a stable neighborhood.
pub fn ring_offsets(m: usize, radius: f64) -> Vec<(f64, f64)> {
    (0..m)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.channels;
        let c1 = (d / 2).max(4);
        let s = cfg.stride;
        let n2 = cfg.effective_context_side() * cfg.effective_context_side();
        let sim_in = cfg.similarity_input();
        let sim_hidden = 4 * n2.max(2);
        let m = cfg.samples;

        // Feature extractor: patchify conv (k = stride), a 3x3 conv, then a
        // 1x1 mixing conv. Padding-free first layer keeps the stride grid
        // symmetric under horizontal flips.
        let he = |rng: &mut ChaCha8Rng, fan_in: usize, n: usize| {
            normal(rng, n, (2.0 / fan_in as f64).sqrt())
        };
        p.insert(
            "ext.conv1.w",
            Shape::Kernel(s, s, 3, c1),
            he(&mut rng, s * s * 3, s * s * 3 * c1),
        );
        p.insert("ext.conv1.b", Shape::Vec(c1), zeros(c1));
        p.insert(
            "ext.conv2.w",
            Shape::Kernel(3, 3, c1, d),
            he(&mut rng, 9 * c1, 9 * c1 * d),
        );
        p.insert("ext.conv2.b", Shape::Vec(d), zeros(d));
        p.insert(
            "ext.conv3.w",
            Shape::Kernel(1, 1, d, d),
            normal(&mut rng, d * d, (1.0 / d as f64).sqrt()),
        );
        p.insert("ext.conv3.b", Shape::Vec(d), zeros(d));

        let lin = |rng: &mut ChaCha8Rng, fan_in: usize, n: usize| {
            normal(rng, n, (1.0 / fan_in as f64).sqrt())
        };
        for layer in 0..cfg.layers {
            let pre = format!("dec{layer}");
            // Temporal attention projections; queries/keys start small so
            // the unscaled logits of the attention stay moderate.
            p.insert(
                &format!("{pre}.vlta.wq"),
                Shape::Mat(d, d),
                normal(&mut rng, d * d, 1.0 / d as f64),
            );
            p.insert(
                &format!("{pre}.vlta.wk"),
                Shape::Mat(d, d),
                normal(&mut rng, d * d, 1.0 / d as f64),
            );
            p.insert(&format!("{pre}.vlta.wv"), Shape::Mat(d, d), lin(&mut rng, d, d * d));
            p.insert(&format!("{pre}.vlta.wo"), Shape::Mat(d, d), lin(&mut rng, d, d * d));
            p.insert(&format!("{pre}.vlta.ln.g"), Shape::Vec(d), ones(d));
            p.insert(&format!("{pre}.vlta.ln.b"), Shape::Vec(d), zeros(d));

            // Offset head: zero-initialized final layer with a ring bias.
            p.insert(&format!("{pre}.cca.off.w1"), Shape::Mat(d, d), lin(&mut rng, d, d * d));
            p.insert(&format!("{pre}.cca.off.b1"), Shape::Vec(d), zeros(d));
            p.insert(&format!("{pre}.cca.off.w2"), Shape::Mat(d, 2 * m), zeros(d * 2 * m));
            let ring: Vec<f64> = ring_offsets(m, 2.0)
                .into_iter()
                .flat_map(|(x, y)| [x, y])
                .collect();
            p.insert(&format!("{pre}.cca.off.b2"), Shape::Vec(2 * m), ring);

            // Patch-similarity head.
            p.insert(
                &format!("{pre}.cca.sim.w1"),
                Shape::Mat(sim_in, sim_hidden),
                normal(&mut rng, sim_in * sim_hidden, 1.0 / (sim_in as f64).sqrt() / (d as f64).sqrt()),
            );
            p.insert(&format!("{pre}.cca.sim.b1"), Shape::Vec(sim_hidden), zeros(sim_hidden));
            p.insert(
                &format!("{pre}.cca.sim.w2"),
                Shape::Mat(sim_hidden, 1),
                lin(&mut rng, sim_hidden, sim_hidden),
            );
            p.insert(&format!("{pre}.cca.sim.b2"), Shape::Vec(1), zeros(1));

            // Decoupled position-update weights: a small MLP shared across
            // sampling points (equal similarities therefore map to equal
            // weights, keeping symmetric offset sets balanced).
            let dh = 8;
            p.insert(&format!("{pre}.cca.dec.w1"), Shape::Mat(1, dh), normal(&mut rng, dh, 0.5));
            p.insert(&format!("{pre}.cca.dec.b1"), Shape::Vec(dh), zeros(dh));
            p.insert(&format!("{pre}.cca.dec.w2"), Shape::Mat(dh, 1), normal(&mut rng, dh, 0.5 / (dh as f64).sqrt()));
            p.insert(&format!("{pre}.cca.dec.b2"), Shape::Vec(1), zeros(1));
            p.insert(&format!("{pre}.cca.ln.g"), Shape::Vec(d), ones(d));
            p.insert(&format!("{pre}.cca.ln.b"), Shape::Vec(d), zeros(d));

            for head in ["wq", "wk", "wv", "wo"] {
                p.insert(
                    &format!("{pre}.self.{head}"),
                    Shape::Mat(d, d),
                    normal(&mut rng, d * d, 0.5 / (d as f64).sqrt()),
                );
            }
            p.insert(&format!("{pre}.self.ln.g"), Shape::Vec(d), ones(d));
            p.insert(&format!("{pre}.self.ln.b"), Shape::Vec(d), zeros(d));

            let f = cfg.ffn_hidden;
            p.insert(&format!("{pre}.ffn.w1"), Shape::Mat(d, f), he(&mut rng, d, d * f));
            p.insert(&format!("{pre}.ffn.b1"), Shape::Vec(f), zeros(f));
            p.insert(&format!("{pre}.ffn.w2"), Shape::Mat(f, d), lin(&mut rng, f, f * d));
            p.insert(&format!("{pre}.ffn.b2"), Shape::Vec(d), zeros(d));
            p.insert(&format!("{pre}.ffn.ln.g"), Shape::Vec(d), ones(d));
            p.insert(&format!("{pre}.ffn.ln.b"), Shape::Vec(d), zeros(d));
        }

        // Visibility head: 2-layer MLP ending in a sigmoid. A small (not
        // zero) last layer feeds feature gradients from the first step.
        let vh = (d / 2).max(2);
        p.insert("vis.w1", Shape::Mat(d, vh), lin(&mut rng, d, d * vh));
        p.insert("vis.b1", Shape::Vec(vh), zeros(vh));
        p.insert(
            "vis.w2",
            Shape::Mat(vh, 1),
            normal(&mut rng, vh, 0.5 / (vh as f64).sqrt()),
        );
        p.insert("vis.b2", Shape::Vec(1), zeros(1));

        // Global-matching fusion: starts near the mean of the per-context
        // similarity maps, with noise to break hidden-unit symmetry.
        let gm_hidden = 4 * n2.max(2);
        let mut w1 = normal(&mut rng, n2 * gm_hidden, 0.05 / n2 as f64);
        for v in w1.iter_mut() {
            *v += 1.0 / n2 as f64;
        }
        p.insert("gm.fuse.w1", Shape::Mat(n2, gm_hidden), w1);
        p.insert("gm.fuse.b1", Shape::Vec(gm_hidden), vec![0.05; gm_hidden]);
        let mut w2 = normal(&mut rng, gm_hidden, 0.05 / gm_hidden as f64);
        for v in w2.iter_mut() {
            *v += 1.0 / gm_hidden as f64;
        }
        p.insert("gm.fuse.w2", Shape::Mat(gm_hidden, 1), w2);
        p.insert("gm.fuse.b2", Shape::Vec(1), zeros(1));

        match cfg.context_update {
            ContextUpdate::Frozen => {}
            ContextUpdate::Mlp => {
                // Residual update MLP over [context row, current feature];
                // zero last layer starts identical to the frozen variant.
                p.insert("ctx.mlp.w1", Shape::Mat(2 * d, d), lin(&mut rng, 2 * d, 2 * d * d));
                p.insert("ctx.mlp.b1", Shape::Vec(d), zeros(d));
                p.insert("ctx.mlp.w2", Shape::Mat(d, d), zeros(d * d));
                p.insert("ctx.mlp.b2", Shape::Vec(d), zeros(d));
            }
            ContextUpdate::Vlta => {
                p.insert("ctx.vlta.wq", Shape::Mat(d, d), normal(&mut rng, d * d, 1.0 / d as f64));
                p.insert("ctx.vlta.wk", Shape::Mat(d, d), normal(&mut rng, d * d, 1.0 / d as f64));
                p.insert("ctx.vlta.wv", Shape::Mat(d, d), lin(&mut rng, d, d * d));
                p.insert("ctx.vlta.wo", Shape::Mat(d, d), zeros(d * d));
                p.insert("ctx.vlta.ln.g", Shape::Vec(d), ones(d));
                p.insert("ctx.vlta.ln.b", Shape::Vec(d), zeros(d));
            }
        }

        Ok(Self { cfg: cfg.clone(), params: p })
    }

    /// Sampling grid shared by query preparation and cross-attention.
    pub fn grid(&self) -> Grid {
        make_grid(self.cfg.effective_context_side(), 1.0).expect("validated config")
    }

    /// Resolve every parameter group on a tape. Called once per tape.
    pub fn vars(&self, tape: &Tape) -> ModelVars {
        let p = &self.params;
        let layers = (0..self.cfg.layers)
            .map(|layer| {
                let pre = format!("dec{layer}");
                LayerVars {
                    vlta: AttnVars {
                        wq: p.var(tape, &format!("{pre}.vlta.wq")),
                        wk: p.var(tape, &format!("{pre}.vlta.wk")),
                        wv: p.var(tape, &format!("{pre}.vlta.wv")),
                        wo: p.var(tape, &format!("{pre}.vlta.wo")),
                        ln_g: p.var(tape, &format!("{pre}.vlta.ln.g")),
                        ln_b: p.var(tape, &format!("{pre}.vlta.ln.b")),
                    },
                    cca: CcaVars {
                        off_w1: p.var(tape, &format!("{pre}.cca.off.w1")),
                        off_b1: p.var(tape, &format!("{pre}.cca.off.b1")),
                        off_w2: p.var(tape, &format!("{pre}.cca.off.w2")),
                        off_b2: p.var(tape, &format!("{pre}.cca.off.b2")),
                        sim_w1: p.var(tape, &format!("{pre}.cca.sim.w1")),
                        sim_b1: p.var(tape, &format!("{pre}.cca.sim.b1")),
                        sim_w2: p.var(tape, &format!("{pre}.cca.sim.w2")),
                        sim_b2: p.var(tape, &format!("{pre}.cca.sim.b2")),
                        dec_w1: p.var(tape, &format!("{pre}.cca.dec.w1")),
                        dec_b1: p.var(tape, &format!("{pre}.cca.dec.b1")),
                        dec_w2: p.var(tape, &format!("{pre}.cca.dec.w2")),
                        dec_b2: p.var(tape, &format!("{pre}.cca.dec.b2")),
                        ln_g: p.var(tape, &format!("{pre}.cca.ln.g")),
                        ln_b: p.var(tape, &format!("{pre}.cca.ln.b")),
                    },
                    self_attn: AttnVars {
                        wq: p.var(tape, &format!("{pre}.self.wq")),
                        wk: p.var(tape, &format!("{pre}.self.wk")),
                        wv: p.var(tape, &format!("{pre}.self.wv")),
                        wo: p.var(tape, &format!("{pre}.self.wo")),
                        ln_g: p.var(tape, &format!("{pre}.self.ln.g")),
                        ln_b: p.var(tape, &format!("{pre}.self.ln.b")),
                    },
                    ffn: FfnVars {
                        w1: p.var(tape, &format!("{pre}.ffn.w1")),
                        b1: p.var(tape, &format!("{pre}.ffn.b1")),
                        w2: p.var(tape, &format!("{pre}.ffn.w2")),
                        b2: p.var(tape, &format!("{pre}.ffn.b2")),
                        ln_g: p.var(tape, &format!("{pre}.ffn.ln.g")),
                        ln_b: p.var(tape, &format!("{pre}.ffn.ln.b")),
                    },
                }
            })
            .collect();
        ModelVars {
            ext: ExtractorVars {
                conv1_w: p.var(tape, "ext.conv1.w"),
                conv1_b: p.var(tape, "ext.conv1.b"),
                conv2_w: p.var(tape, "ext.conv2.w"),
                conv2_b: p.var(tape, "ext.conv2.b"),
                conv3_w: p.var(tape, "ext.conv3.w"),
                conv3_b: p.var(tape, "ext.conv3.b"),
            },
            layers,
            vis: MlpVars {
                w1: p.var(tape, "vis.w1"),
                b1: p.var(tape, "vis.b1"),
                w2: p.var(tape, "vis.w2"),
                b2: p.var(tape, "vis.b2"),
            },
            fuse: MlpVars {
                w1: p.var(tape, "gm.fuse.w1"),
                b1: p.var(tape, "gm.fuse.b1"),
                w2: p.var(tape, "gm.fuse.w2"),
                b2: p.var(tape, "gm.fuse.b2"),
            },
            ctx_mlp: match self.cfg.context_update {
                ContextUpdate::Mlp => Some(MlpVars {
                    w1: p.var(tape, "ctx.mlp.w1"),
                    b1: p.var(tape, "ctx.mlp.b1"),
                    w2: p.var(tape, "ctx.mlp.w2"),
                    b2: p.var(tape, "ctx.mlp.b2"),
                }),
                _ => None,
            },
            ctx_vlta: match self.cfg.context_update {
                ContextUpdate::Vlta => Some(AttnVars {
                    wq: p.var(tape, "ctx.vlta.wq"),
                    wk: p.var(tape, "ctx.vlta.wk"),
                    wv: p.var(tape, "ctx.vlta.wv"),
                    wo: p.var(tape, "ctx.vlta.wo"),
                    ln_g: p.var(tape, "ctx.vlta.ln.g"),
                    ln_b: p.var(tape, "ctx.vlta.ln.b"),
                }),
                _ => None,
            },
        }
    }
}

/// Attention projection weights plus the post-residual LayerNorm.
#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

impl AttnVars {
    /// Identity projections: reproduces the raw (projection-free) attention
    /// form exactly. Used by unit tests.
    pub fn identity_init(tape: &Tape, d: usize) -> Self {
        let eye = || tape.constant(identity(d), Shape::Mat(d, d));
        Self {
            wq: eye(),
            wk: eye(),
            wv: eye(),
            wo: eye(),
            ln_g: tape.constant(ones(d), Shape::Vec(d)),
            ln_b: tape.constant(zeros(d), Shape::Vec(d)),
        }
    }
}

#[derive(Clone, Copy)]
pub struct CcaVars {
    pub off_w1: Var,
    pub off_b1: Var,
    pub off_w2: Var,
    pub off_b2: Var,
    pub sim_w1: Var,
    pub sim_b1: Var,
    pub sim_w2: Var,
    pub sim_b2: Var,
    pub dec_w1: Var,
    pub dec_b1: Var,
    pub dec_w2: Var,
    pub dec_b2: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

#[derive(Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln_g: Var,
    pub ln_b: Var,
}

/// Two-layer MLP weights (visibility head, global-match fusion, context MLP).
#[derive(Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy)]
pub struct ExtractorVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub conv3_w: Var,
    pub conv3_b: Var,
}

pub struct ModelVars {
    pub ext: ExtractorVars,
    pub layers: Vec<LayerVars>,
    pub vis: MlpVars,
    pub fuse: MlpVars,
    pub ctx_mlp: Option<MlpVars>,
    pub ctx_vlta: Option<AttnVars>,
}

pub struct LayerVars {
    pub vlta: AttnVars,
    pub cca: CcaVars,
    pub self_attn: AttnVars,
    pub ffn: FfnVars,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_build_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = Model::new(&cfg, 3).unwrap();
        let b = Model::new(&cfg, 3).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::new(&cfg, 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn ring_bias_matches_offsets() {
        let ring = ring_offsets(8, 2.0);
        assert_eq!(ring.len(), 8);
        assert!((ring[0].0 - 2.0).abs() < 1e-12);
        for (x, y) in ring {
            assert!((x * x + y * y - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn vars_resolve_every_group() {
        let model = Model::new(&ModelConfig::default(), 1).unwrap();
        let tape = Tape::new();
        let vars = model.vars(&tape);
        assert_eq!(vars.layers.len(), model.cfg.layers);
        assert!(vars.ctx_mlp.is_none());
    }
}
