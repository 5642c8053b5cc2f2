//! Token-adaptive mixture-of-experts routing with null experts.
//!
//! A router scores `n` true experts and `m` parameter-free null experts and
//! keeps the top `k`. Because null experts cost nothing, the number of true
//! experts that actually run varies per token. The crate provides:
//!
//! * a small reverse-mode tape ([`Tape`]) over dense [`Tensor`]s,
//! * the router ([`routing`]) and the layer built on it ([`layer`]),
//! * the load-balancing losses and loss-weight schedule ([`losses`]),
//! * load, bypass, FLOPs and sharpness metrics ([`metrics`]),
//! * a desk-scale training harness on synthetic tasks ([`harness`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type to `f64`, which the harness uses.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod layer;
pub mod losses;
pub mod metrics;
pub mod routing;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Activation, Tape, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use layer::{expand_router, layer_forward, make_moe_block, ExpertParams, MoeLayer};
pub use losses::{alpha_at, collect_load_stats, load_loss_null, load_loss_vanilla, AnnealSchedule, LoadStats};
pub use metrics::{average_load, bypass_rate, flops_reduction, sharpness_counts, FlopsAccount, RoutingReport};
pub use routing::{
    route_batch, route_token, route_token_top_p, Normalization, NullKind, RouterConfig, RouterVariant,
    RoutingDecision,
};
pub use scalar::Scalar;
pub use tensor::{softmax, topk_mask, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type MoeLayer64 = MoeLayer<f64>;
pub type RoutingDecision64 = RoutingDecision<f64>;
pub type LoadStats64 = LoadStats<f64>;
pub type Checkpoint64 = Checkpoint<f64>;

pub type Tensor32 = Tensor<f32>;
pub type MoeLayer32 = MoeLayer<f32>;
