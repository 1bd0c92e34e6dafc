use synthbench::models::{run_model, ExternalModel, PatchModel, SubjectContext};
use synthbench::patching::{build_patch_grid, gaussian_importance};
use synthbench::volume::{Geometry, Modality, Volume};

// `cat` echoes every frame back, so the subprocess model acts as identity.
#[test]
fn echoing_process_is_identity() {
    let g = Geometry::new([20, 18, 12], [1.0; 3]).unwrap();
    let vol = Volume::from_fn(g, Modality::MriT1w, |x, y, z| ((x * 5 + y * 3 + z) % 11) as f32 / 11.0).unwrap();
    let model = ExternalModel::spawn("echo", "cat", &[]).unwrap();
    assert_eq!(model.descriptor().name, "echo");
    let grid = build_patch_grid(vol.dims(), [8; 3], 0.5).unwrap();
    let imap = gaussian_importance([8; 3], 0.125).unwrap();
    let ctx = SubjectContext::new("s", Modality::Ct);
    let out = run_model(&model, &vol, &ctx, &grid, &imap).unwrap();
    assert_eq!(out.modality(), Modality::Ct);
    let worst = out.data().iter().zip(vol.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn missing_program_is_reported() {
    assert!(ExternalModel::spawn("x", "/nonexistent/model-binary", &[]).is_err());
}
