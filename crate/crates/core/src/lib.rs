//! Multi-robot navigation through mixed-integer convex programming.
//!
//! The pipeline: a scene of robots and rectangular obstacles becomes a
//! heterogeneous proximity graph ([`scene`]); the receding-horizon planning
//! problem over that graph is a parametric mixed-integer QP with big-M
//! collision-avoidance rows ([`micp`]); an exact branch-and-bound solver
//! labels optimal binary strategies offline ([`oracle`]); a heterogeneous
//! graph-attention network learns to predict those strategies from scene
//! parameters ([`gat`]); and the remaining convex program is solved online
//! either centrally ([`qp`]) or by distributed proximal ADMM across robots
//! ([`admm`]). The closed loop and its evaluation metrics live in [`sim`].

pub mod admm;
pub mod config;
pub mod gat;
pub mod micp;
pub mod oracle;
pub mod qp;
pub mod scene;
pub mod sim;
