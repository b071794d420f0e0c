//! HTTP service exposing a trained checkpoint for interactive editing.
//!
//! | Route | Body | Response |
//! |---|---|---|
//! | `GET /healthz` | – | `{status, K, latent_dim, checkpoint_id, …}` |
//! | `GET /directions` | – | `[{index, score, centroid_norm}]`, best score first |
//! | `POST /generate` | `{seed, shifts: [{k, eps}]}` | PNG, `x-latent-norm` header |
//! | `POST /strip` | `{seed, shifts, sweep: {k, lo, hi, n}}` | JSON array of base64 PNGs |
//!
//! Magnitudes are clamped to `[-8, 8]`. Malformed bodies get 400, requests
//! that parse but name an unknown direction or exceed a limit get 422.

mod api;
mod explorer;

pub use api::{router, serve, ApiError, AppState};
pub use explorer::{
    DirectionInfo, EditStack, Explorer, ExplorerOptions, Rendered, ShiftItem, StripRequest, Sweep, EPS_LIMIT,
    MAX_SHIFTS, MAX_STRIP,
};
