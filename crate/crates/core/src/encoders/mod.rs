//! Per-modality encoders turning raw incident observations into token rows.

mod logs;
mod metric;
mod tables;
mod trace;

pub use logs::{cosine, log_embed, template_assign, TemplateAssignment, TemplatePrototypes, N_TEMPLATES, TEMPLATE_TEMPERATURE};
pub use metric::{grid_len, metric_grid, normalize_metrics, Dcc, DccLayer, BASELINE_FRACTION};
pub use tables::{EmbeddingTable, EntityEncoder, EventEncoder};
pub use trace::{span_neighbourhood, span_scalars, GatLayer, TraceGat, SPAN_SCALAR_FEATURES};
