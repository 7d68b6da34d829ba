//! One camera update on a landmark grid corrects a displaced pose.

use mimu::camera::{project, CameraModel, CameraSample, LandmarkSet};
use mimu::filter::{FilterOptions, MultiImuFilter};
use mimu::propagation::{ImuProcessNoise, ProcessNoise};
use mimu::state::{BodySigma, BodyState, FilterState, ImuCalibration, ImuSigma};
use nalgebra::Vector3;

fn main() -> mimu::Result<()> {
    let cam = CameraModel::default();
    let landmarks = LandmarkSet::grid(10, 10, 0.5, 5.0)?;
    let truth = FilterState::with_defaults(BodyState::default(), vec![ImuCalibration::reference()])?;
    let observations: Vec<_> = landmarks
        .points()
        .iter()
        .enumerate()
        .filter_map(|(id, l)| project(&truth, &cam, l).map(|uv| (id, uv)))
        .collect();
    println!("{} of {} landmarks visible", observations.len(), landmarks.len());

    let sigma = BodySigma {
        position: 0.05,
        ..BodySigma::default()
    };
    let mut start = FilterState::new(truth.body.clone(), truth.imus.clone(), &sigma, &[ImuSigma::default()])?;
    start.body.position += Vector3::new(0.02, -0.03, 0.01);
    let pn = ProcessNoise::new(vec![ImuProcessNoise::from_random_walk(1e-4, 1e-5)]);
    let mut filter = MultiImuFilter::new(start, pn, FilterOptions::default());
    println!("before: position {:.4?}", filter.state.body.position.as_slice());
    filter.process_camera(&CameraSample { t: 0.0, observations }, &cam, &landmarks)?;
    println!("after:  position {:.4?}  NIS {:.2}", filter.state.body.position.as_slice(), filter.last_nis().unwrap_or(f64::NAN));
    Ok(())
}
