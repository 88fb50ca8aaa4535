//! Loss-landscape flatness probing and class activation maps.

mod cam;
mod flatness;

pub use cam::{bilinear, cam, cam_all, map_csv, normalize_unit, overlay_rgb, CamResult};
pub use flatness::{
    auto_sigma_grid, estimate_flatness, perturb_parameters, perturbed_count, pinned_slope,
    profile_csv, quadratic_profile, FlatnessReport, LossSurface, ModelLoss, PerturbationConfig,
    QuadraticLoss, SigmaGrid, SigmaPoint, AUTO_GRID_POINTS, MAX_EXCLUDED_FRACTION,
};
