//! Default protocol constants. Every knob in the pipeline defaults to these;
//! config tests pin them so a default run always reproduces the reference
//! experimental setup.

/// Training patch side.
pub const PATCH_SIZE: usize = 98;
/// Minibatch size (also the persistent chain count).
pub const MINIBATCH: usize = 64;
pub const N_CHAINS: usize = 64;
/// Per-chain, per-update restart probability.
pub const RESTART_PROB: f64 = 0.01;

/// First-layer receptive field side.
pub const KERNEL_SIZE: usize = 11;
/// Diagonal tiling offsets.
pub const NUM_TILINGS: usize = 11;
/// Filters per tiling set.
pub const FILTERS_PER_TILING: usize = 32;

/// Upper-layer receptive field side.
pub const UPPER_KERNEL: usize = 2;
/// Upper-layer filter count for deep stacks.
pub const UPPER_FILTERS: usize = 128;

/// FPCD fast-weight decay per update (19/20).
pub const FAST_DECAY: f64 = 0.95;

/// Default L2 cap on shared kernels (keeps the joint distribution proper
/// while the gated precisions adapt).
pub const KERNEL_NORM_MAX: f64 = 1.0;

/// Component-wise clip on preconditioned gradient estimates.
pub const GRAD_CLIP: f64 = 5.0;

/// Synthesis: number of collected samples and their side.
pub const SAMPLE_COUNT: usize = 128;
pub const SAMPLE_SIZE: usize = 120;
/// Synthesis chain warm-up sweeps and gap between collected samples.
pub const SAMPLE_BURN_IN: usize = 2000;
pub const SAMPLE_THIN: usize = 50;

/// Inpainting: frame side, free center side, Gibbs iterations, number of
/// frames per texture and seeds per frame.
pub const INPAINT_FRAME: usize = 76;
pub const INPAINT_CENTER: usize = 54;
pub const INPAINT_ITERS: usize = 500;
pub const INPAINT_FRAMES: usize = 20;
pub const INPAINT_SEEDS: usize = 5;

/// Patch side for the texture similarity score.
pub const TSS_PATCH: usize = 19;

/// Source texture rescale targets.
pub const RESCALE_LARGE: usize = 480;
pub const RESCALE_SMALL: usize = 320;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::TiledGeometry;

    #[test]
    fn default_sides_satisfy_tiling_divisibility() {
        for side in [PATCH_SIZE, SAMPLE_SIZE, INPAINT_FRAME, INPAINT_CENTER] {
            assert!(
                TiledGeometry::new(side, side, KERNEL_SIZE, NUM_TILINGS, 1).is_ok(),
                "side {side}"
            );
        }
    }
}
