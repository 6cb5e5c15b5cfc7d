pub mod camera;
pub mod error;
pub mod exposure;
pub mod gaussian;
pub mod image;
pub mod linalg;
pub mod mapper;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod real;
pub mod scaffold;
pub mod se3;
pub mod ssim;
pub mod tracker;
pub mod uncertainty;

pub use error::{Error, Result};
pub use real::Real;

pub type Pose = se3::SE3Pose<f64>;
pub type Pose32 = se3::SE3Pose<f32>;
pub type Camera = camera::PinholeCamera<f64>;
pub type Scene = gaussian::GaussianScene<f64>;
pub type Scene32 = gaussian::GaussianScene<f32>;
pub type Gaussian = gaussian::GaussianPrimitive<f64>;
pub type Scaffold = scaffold::ScaffoldGraph<f64>;
pub type ImageF = image::Image<f64>;
