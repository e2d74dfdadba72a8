//! Discrete closed manifolds: periodic grids, conformal metrics, geodesic
//! distance oracles, domains of influence, and the crescent set family.

mod fast_marching;
mod flat;
mod grid;
mod sets;

pub use fast_marching::{geodesic_distance_field, DistanceCache};
pub use flat::{cut_time_flat_oracle, FlatGeodesic};
pub use grid::{
    ConformalMetric, CovectorField, IndicatorSet, PeriodicGrid, ScalarPotential,
    MIN_NODES_PER_AXIS,
};
pub use sets::{
    delta_ladder, domain_of_influence, flat_set_diameter, influence_from_field, metric_ball,
    set_measure, smoothness_gate_ok, z_delta, z_delta_parts, CrescentSets,
};
