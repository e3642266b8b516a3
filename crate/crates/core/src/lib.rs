//! Multi-task view synthesis on procedural toy scenes.
//!
//! A conditional radiance field predicts RGB plus a set of dense scene
//! properties (surface normals, shading, edges, keypoints, semantic labels)
//! at novel camera poses, conditioned on a handful of posed source views.
//! Everything runs on CPU in double precision on top of a small tape-based
//! reverse-mode autodiff engine (`tape`).

pub mod config;
pub mod decoder;

/// Raise the malloc mmap threshold so multi-megabyte tensor buffers are
/// recycled through the heap instead of being returned to the kernel on
/// every free. Called once by long-running entry points; safe to repeat.
pub fn tune_allocator() {
    #[cfg(target_env = "gnu")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
    }
}
pub mod encoder;
pub mod evalsuite;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod renderer;
pub mod setting2;
pub mod tape;
pub mod toyscenes;
pub mod training;
