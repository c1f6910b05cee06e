use dofnerf::dataset::{make_recovery_dataset, AnalyticScene, RecoverySpec, SceneDataset, Split, View};
use dofnerf::field::FieldArch;
use dofnerf::optics::ApertureShape;
use dofnerf::raster::Image;
use dofnerf::sampling::{patch_batch, CameraModel, PatchSpec};
use dofnerf::scatter::ScatterSettings;
use dofnerf::trainer::{defocus_objective, pinhole_objective, stage1_step, stage2_step, TrainConfig, TrainState};

fn small_arch() -> FieldArch {
    FieldArch {
        hidden_layers: 2,
        hidden_width: 16,
        pos_freqs: 3,
        dir_freqs: 1,
    }
}

fn small_config(iters: usize, pretrain: usize) -> TrainConfig {
    TrainConfig {
        arch: small_arch(),
        iters,
        pretrain,
        batch_size: 64,
        samples: 16,
        lr: 1e-2,
        patch: PatchSpec {
            patch: 8,
            anchor: 4,
            guard: 3,
        },
        max_radius: 3.0,
        ..TrainConfig::default()
    }
}

fn recovery_16() -> SceneDataset {
    let spec = RecoverySpec {
        train_views: 4,
        test_views: 1,
        width: 16,
        height: 16,
        focal: 16.0,
        max_radius: 3.0,
        ..RecoverySpec::default()
    };
    make_recovery_dataset(&AnalyticScene::recovery_default(), &spec, 1).unwrap()
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn constant_color_view_is_fit_by_pinhole_training() {
    let camera = CameraModel::centered(8, 8, 8.0, CameraModel::look_at([0.0; 3], [0.0, 0.0, 1.0]), 0.5, 4.0);
    let view = |name: &str, split| View {
        name: name.into(),
        camera,
        image: Image::filled(8, 8, [0.2, 0.6, 0.9]),
        all_in_focus: None,
        split,
        optics: None,
    };
    let data = SceneDataset {
        views: vec![view("train_000", Split::Train), view("test_000", Split::Test)],
        source: None,
    };
    let mut state = TrainState::new(&data, &small_config(500, 500)).unwrap();
    let losses: Vec<f64> = (0..500).map(|_| stage1_step(&mut state, &data).unwrap()).collect();
    let tail = losses[490..].iter().sum::<f64>() / 10.0;
    assert!(tail < 1e-4, "final loss {tail}");
}

#[test]
fn pinhole_loss_goes_down() {
    let data = recovery_16();
    let mut state = TrainState::new(&data, &small_config(500, 500)).unwrap();
    let losses: Vec<f64> = (0..500).map(|_| stage1_step(&mut state, &data).unwrap()).collect();
    assert!(median(&losses[400..]) < median(&losses[..100]));
}

#[test]
fn closed_aperture_defocus_objective_is_the_pinhole_objective() {
    let data = recovery_16();
    let config = small_config(10, 5);
    let state = TrainState::new(&data, &config).unwrap();
    for seed in 0..4 {
        let batch = patch_batch(&data, &config.patch, seed).unwrap();
        let (side, g) = (batch.grid_side, batch.guard);
        let rays: Vec<_> = (g..side - g)
            .flat_map(|y| (g..side - g).map(move |x| y * side + x))
            .map(|i| batch.rays[i])
            .collect();
        let settings = ScatterSettings {
            aperture: 0.0,
            focus: 2.0,
            shape: ApertureShape::Circular,
            gamma: 1.0,
            max_radius: 3.0,
        };
        let d = defocus_objective(&state.params, &batch, &settings, 16, None).unwrap();
        let (loss, grads) = pinhole_objective(&state.params, &rays, &batch.targets, 16, None).unwrap();
        assert!((d.loss - loss).abs() <= 1e-14 * loss);
        let scale = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (a, b) in d.params.iter().zip(&grads) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
        assert!(d.aperture.is_finite());
    }
}

#[test]
fn optics_stay_in_range_under_huge_steps() {
    let data = recovery_16();
    let config = TrainConfig {
        optics_lr: Some(50.0),
        focus_lr: Some(50.0),
        ..small_config(40, 0)
    };
    let mut state = TrainState::new(&data, &config).unwrap();
    let (near, far) = data.depth_range();
    for _ in 0..40 {
        assert!(stage2_step(&mut state, &data).unwrap().is_finite());
        for (i, v) in state.optics.views.iter().enumerate() {
            assert!(v.aperture >= 0.0 && v.aperture.is_finite());
            assert!((0.0..=1.0).contains(&v.focus));
            let f = state.optics.focus_distance(i);
            assert!(f >= near && f <= far);
        }
    }
    let trained = data.train_indices();
    assert!(trained.iter().any(|&i| state.optics.views[i].aperture != 0.5));
    for i in data.test_indices() {
        assert_eq!(
            (state.optics.views[i].aperture, state.optics.views[i].focus),
            (0.5, 0.5)
        );
    }
}
