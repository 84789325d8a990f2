//! Learnable parameters, generic over the slot type so the same layout holds
//! concrete tensors ([`ModelParams`]), tape handles ([`ParamVars`]) or
//! gradients.
//!
//! Weights act on row vectors (`x · W`), so a `d_in → d_out` projection is
//! stored as `[d_in × d_out]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gru::GruVars;
use crate::model::ModelConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

param_group!(
    /// Gated recurrent unit weights for the item-item branch.
    GruParams {
        w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n,
    }
);

param_group!(
    /// Scores a time-interval embedding: `d → d → 1` with LeakyReLU, shared
    /// across layers.
    IntervalMlp {
        w1, b1, w2, b2,
    }
);

param_group!(
    /// Per-layer relation weights.
    LayerParams {
        /// `[d×1]` projection of the interest in the assignment score.
        assign_interest,
        /// `[d×1]` projection of the item in the assignment score.
        assign_item,
        /// `[d×d]` item transform pooled into interests.
        extract_trans,
        /// `[d×d]` item side of the bilinear attaching score.
        attach_item,
        /// `[d×d]` interest side of the bilinear attaching score.
        attach_interest,
        /// `[d×1]` weight on the item-interest temporal distance embedding.
        attach_time_w,
        /// `[1]` bias of the temporal term.
        attach_time_b,
        /// `[d×d]` interest transform scattered back to items.
        attach_trans,
    }
);

param_group!(
    /// Gating and session readout weights.
    ReadoutParams {
        /// `[2d×1]` balance between initial and propagated item states.
        gate,
        /// `[2d×d]` and `[d]`: item state ∥ time embedding → attention key.
        w0, b0,
        /// `[d×d]` key and interest projections inside the attention.
        w1, w2,
        /// `[d×1]` attention vector and `[d]` bias.
        q, b,
        /// `[2d×d]` pooled items ∥ interest → session vector.
        w3,
        /// `[1×d]` learned query standing in for interests when they are disabled.
        query,
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    /// `[|V|×d]`
    pub item_embeddings: T,
    /// `[(m+1)×d]`
    pub temporal_table: T,
    pub interval_mlp: IntervalMlp<T>,
    pub layers: Vec<(GruParams<T>, LayerParams<T>)>,
    pub readout: ReadoutParams<T>,
}

pub type ModelParams = ParamSet<Tensor>;
pub type ParamVars = ParamSet<Var>;

impl<T> ParamSet<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ParamSet<U> {
        ParamSet {
            item_embeddings: f("item_embeddings", &self.item_embeddings),
            temporal_table: f("temporal_table", &self.temporal_table),
            interval_mlp: self.interval_mlp.map("interval_mlp.", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(k, (gru, rel))| (gru.map(&format!("layer{k}.gru."), f), rel.map(&format!("layer{k}."), f)))
                .collect(),
            readout: self.readout.map("readout.", f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("item_embeddings".into(), &self.item_embeddings);
        f("temporal_table".into(), &self.temporal_table);
        self.interval_mlp.visit("interval_mlp.", f);
        for (k, (gru, rel)) in self.layers.iter().enumerate() {
            gru.visit(&format!("layer{k}.gru."), f);
            rel.visit(&format!("layer{k}."), f);
        }
        self.readout.visit("readout.", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        f("item_embeddings".into(), &mut self.item_embeddings);
        f("temporal_table".into(), &mut self.temporal_table);
        self.interval_mlp.visit_mut("interval_mlp.", f);
        for (k, (gru, rel)) in self.layers.iter_mut().enumerate() {
            gru.visit_mut(&format!("layer{k}.gru."), f);
            rel.visit_mut(&format!("layer{k}."), f);
        }
        self.readout.visit_mut("readout.", f);
    }

    /// All slots in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }
}

impl ModelParams {
    /// Zero tensors with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let z = Tensor::zeros;
        let layer = || {
            (
                GruParams {
                    w_z: z(&[d, d]),
                    w_r: z(&[d, d]),
                    w_n: z(&[d, d]),
                    u_z: z(&[d, d]),
                    u_r: z(&[d, d]),
                    u_n: z(&[d, d]),
                    b_z: z(&[d]),
                    b_r: z(&[d]),
                    b_n: z(&[d]),
                },
                LayerParams {
                    assign_interest: z(&[d, 1]),
                    assign_item: z(&[d, 1]),
                    extract_trans: z(&[d, d]),
                    attach_item: z(&[d, d]),
                    attach_interest: z(&[d, d]),
                    attach_time_w: z(&[d, 1]),
                    attach_time_b: z(&[1]),
                    attach_trans: z(&[d, d]),
                },
            )
        };
        ParamSet {
            item_embeddings: z(&[cfg.item_count, d]),
            temporal_table: z(&[cfg.max_step + 1, d]),
            interval_mlp: IntervalMlp {
                w1: z(&[d, d]),
                b1: z(&[d]),
                w2: z(&[d, 1]),
                b2: z(&[1]),
            },
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            readout: ReadoutParams {
                gate: z(&[2 * d, 1]),
                w0: z(&[2 * d, d]),
                b0: z(&[d]),
                w1: z(&[d, d]),
                w2: z(&[d, d]),
                q: z(&[d, 1]),
                b: z(&[d]),
                w3: z(&[2 * d, d]),
                query: z(&[1, d]),
            },
        }
    }

    /// Gaussian initialization, mean 0 and the configured standard deviation,
    /// drawn in canonical slot order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::zeros(cfg);
        for t in params.slots_mut() {
            *t = Tensor::randn(t.shape(), cfg.init_std, &mut rng);
        }
        params
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor on `tape`, as gradient-tracked leaves when
    /// `trainable`, otherwise as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        self.map(&mut |_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Adds `other` elementwise into `self`.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let theirs = other.named();
        for (mine, (_, t)) in self.slots_mut().into_iter().zip(theirs) {
            for (a, b) in mine.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.slots_mut() {
            for a in t.data_mut() {
                *a *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

impl ParamVars {
    /// Gradients of every slot after a backward pass.
    /// Moves the parameter gradients out of a tape after its backward pass.
    pub fn gradients(&self, tape: &mut Tape) -> ModelParams {
        self.map(&mut |_, v| tape.take_grad_tensor(*v))
    }
}

impl GruParams<Var> {
    pub fn vars(&self) -> GruVars {
        GruVars {
            w_z: self.w_z,
            w_r: self.w_r,
            w_n: self.w_n,
            u_z: self.u_z,
            u_r: self.u_r,
            u_n: self.u_n,
            b_z: self.b_z,
            b_r: self.b_r,
            b_n: self.b_n,
        }
    }
}
