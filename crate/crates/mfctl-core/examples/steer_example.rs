//! Steers the two-agent planar example to a quadratic target on trees of
//! increasing depth and prints the checks.

use mfctl_core::samples::two_agent_plane;
use mfctl_core::sde::FnTerminal;
use mfctl_core::synthesis::{run_pipeline, PipelineParams};
use nalgebra::DVector;

fn main() {
    let spec = two_agent_plane();
    let x0 = DVector::from_row_slice(&[1.0, -0.5]);
    let target = FnTerminal(2, |w: &[f64]| {
        let s: f64 = w.iter().sum();
        DVector::from_row_slice(&[s, 1.0 - 0.5 * s * s])
    });
    for depth in [4usize, 6, 8, 10] {
        let plan = run_pipeline(&spec, &x0, &target, &PipelineParams::tree(depth)).expect("example is controllable");
        let v = &plan.verification;
        println!(
            "depth {depth:>2}: lambda(G) = {:?}  |x(0) - x0| = {:.1e}  resim = {:.1e}  c1 = {:.3e}",
            plan.gramian.eigenvalues.as_slice(),
            v.initial_residual,
            v.resimulation_residual.unwrap_or(f64::NAN),
            v.nash.as_ref().map_or(f64::NAN, |f| f.c1),
        );
    }
}
