//! Fixtures shared by the criterion benches: synthetic frames and the sample
//! sets they back-project to.

use latmap_core::ingest::back_project;
use latmap_core::store::synth::{SynthScene, SynthSpec};
use latmap_core::{CameraFrame, GridConfig, Mlp, Sample};

pub const HIDDEN: [usize; 2] = [128, 128];

/// Default decoder for the default grid and 64-wide embeddings.
pub fn decoder(seed: u64) -> Mlp {
    Mlp::init(seed, &HIDDEN, GridConfig::default().encoded_dim(), 64).expect("default shapes are valid")
}

/// One training view of the default scene at `patches` x `patches` resolution.
pub fn frame(patches: usize) -> CameraFrame {
    let scene = SynthScene::new(SynthSpec {
        patch_rows: patches,
        patch_cols: patches,
        train_frames: 1,
        heldout_frames: 0,
        ..Default::default()
    })
    .expect("spec is valid");
    scene.render(&scene.train_pose(0).expect("orbit pose"), 0, 0)
}

/// In-bounds samples from the first `frames` training views of the default scene.
pub fn samples(frames: usize) -> Vec<Sample> {
    let scene = SynthScene::new(SynthSpec {
        train_frames: frames,
        heldout_frames: 0,
        ..Default::default()
    })
    .expect("spec is valid");
    let mut out = Vec::new();
    for f in scene.dataset().expect("synthetic dataset").frames {
        let (mut batch, _) = back_project(&f.frame, &f.id).expect("synthetic frames are valid");
        batch.retain_in_bounds(&SynthSpec::bounds());
        out.extend(batch.samples);
    }
    out
}
