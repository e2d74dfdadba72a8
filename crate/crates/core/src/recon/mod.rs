//! The inversion pipeline: distances on the observation set, cut times,
//! hidden-point distances and travel time data, point localization, metric
//! fit, pointwise wave products, and gauge recovery.

mod distances;
mod gauge;
mod localize;
mod products;

pub use distances::{
    boundary_distance, boundary_distance_experiment, cut_time, hidden_distance,
    interpolate_field, record_scan_experiment, travel_time_data, BoundaryDistance,
    CutTimeConfig, CutTimeEstimate, FanEntry, HiddenDistanceConfig, HiddenDistanceEstimate,
    TravelTimeFunction, TravelTimeSample,
};
pub use gauge::{
    gauge_agreement, recover_gauge, trace_equality_defect, GaugeConfig, GaugeField, GaugeModel,
    GaugeReport,
};
pub use localize::{distance_differential, localize_from_travel_time, recover_metric_at_point};
pub use products::{
    cutoff_inner, pointwise_product, record_product_experiment, CutoffConfig, CutoffInner,
    ProductConfig, ProductEstimate, ProductExperiment,
};
