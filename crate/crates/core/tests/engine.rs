//! End-to-end engine behavior on miniature problems: label blindness of
//! the training path, determinism, moving-average semantics, streaming
//! invariants, and masked updates.

use sfda_core::data::{generate, generate_maps, DatasetSpec, MapSpec, Shift};
use sfda_core::engine::{adapt, adapt_online, adapt_segmentation, pretrain, RunConfig};
use sfda_core::numkit::{load_checkpoint, NamedTensor};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.hidden_dims = vec![16, 16];
    cfg.bottleneck_dim = 8;
    cfg.proj_hidden = 16;
    cfg.proj_dim = 8;
    cfg.views = 3;
    cfg.epochs = 2;
    cfg.pretrain_epochs = 5;
    cfg.batch_size = 32;
    cfg.lr = 0.05;
    cfg.seed = 0;
    cfg
}

fn tiny_data() -> (sfda_core::data::Dataset, sfda_core::data::Dataset) {
    let spec = DatasetSpec {
        source_count: 256,
        target_count: 128,
        noise_sigma: 0.6,
        shift: Shift::Rotation { degrees: 25.0 },
        ..Default::default()
    };
    generate(&spec).unwrap()
}

fn source_state(cfg: &RunConfig, source: &sfda_core::data::Dataset) -> Vec<NamedTensor> {
    pretrain(cfg, source, None, None).unwrap().best_state
}

#[test]
fn pretraining_learns_the_source_and_checkpoints_the_best_epoch() {
    let cfg = tiny_config();
    let (source, _) = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("source.csfd");
    let out = pretrain(&cfg, &source, Some(&model_path), None).unwrap();
    assert!(
        out.best_val_acc > 0.85,
        "well-separated clusters should be learnable, got {}",
        out.best_val_acc
    );
    assert!(out.best_val_acc >= out.final_val_acc);
    let saved = load_checkpoint(&model_path).unwrap();
    assert_eq!(saved, out.best_state, "file holds the best state");
    // 256 samples, 10% held out -> 230 train -> 8 batches of 32 per epoch
    assert_eq!(out.records.len(), 5 * 230_usize.div_ceil(32), "one record per step");
}

#[test]
fn training_path_never_reads_target_labels() {
    let cfg = tiny_config();
    let (source, target) = tiny_data();
    let state = source_state(&cfg, &source);
    let labeled = adapt(&cfg, &state, &target, None, None).unwrap();
    let stripped = adapt(&cfg, &state, &target.without_labels(), None, None).unwrap();

    assert!(stripped.zero_shot_acc.is_nan());
    assert!(stripped.final_acc.is_nan());
    for r in &stripped.records {
        assert!(r.pl_acc.is_nan());
        assert!(r.acc.is_nan());
        assert!(!r.l_total.is_nan());
    }
    // metric columns that do not depend on labels must agree exactly
    for (a, b) in labeled.records.iter().zip(&stripped.records) {
        assert_eq!(a.tau_c.to_bits(), b.tau_c.to_bits());
        assert_eq!(a.sel_frac.to_bits(), b.sel_frac.to_bits());
        assert_eq!(a.l_total.to_bits(), b.l_total.to_bits());
        assert_eq!(a.mu_r.to_bits(), b.mu_r.to_bits());
    }
    assert_eq!(labeled.steps_taken, stripped.steps_taken);
}

#[test]
fn adaptation_is_deterministic_per_seed() {
    let cfg = tiny_config();
    let (source, target) = tiny_data();
    let state = source_state(&cfg, &source);
    let dir = tempfile::tempdir().unwrap();
    let (m1, m2) = (dir.path().join("a.csfd"), dir.path().join("b.csfd"));
    let (c1, c2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    adapt(&cfg, &state, &target, Some(&m1), Some(&c1)).unwrap();
    adapt(&cfg, &state, &target, Some(&m2), Some(&c2)).unwrap();
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
}

#[test]
fn unit_decay_freezes_the_teacher() {
    let mut cfg = tiny_config();
    cfg.ema_decay = 1.0;
    cfg.epochs = 1;
    let (source, target) = tiny_data();
    let state = source_state(&cfg, &source);
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("adapted.csfd");
    adapt(&cfg, &state, &target, Some(&out_path), None).unwrap();
    let student = load_checkpoint(&out_path).unwrap();
    assert_ne!(student, state, "student must move");
    // rerun and inspect the teacher through a second adaptation whose
    // source is the frozen teacher: pseudo-labels must be stable, which
    // shows through identical first-epoch thresholds across epochs only if
    // the teacher never moved; assert directly instead via decay 0 contrast
    let mut moving = cfg.clone();
    moving.ema_decay = 0.0;
    let a = adapt(&cfg, &state, &target, None, None).unwrap();
    let b = adapt(&moving, &state, &target, None, None).unwrap();
    assert_ne!(
        a.records.last().unwrap().tau_c.to_bits(),
        b.records.last().unwrap().tau_c.to_bits(),
        "teacher dynamics must differ between frozen and instant-copy decay"
    );
}

#[test]
fn streaming_pass_touches_each_sample_sparingly() {
    let cfg = tiny_config();
    let (source, target) = tiny_data();
    let state = source_state(&cfg, &source);
    let out = adapt_online(&cfg, &state, &target, None, None).unwrap();
    let budget = cfg.views as u64 + 3;
    assert_eq!(out.touches.len(), target.len());
    for (i, &t) in out.touches.iter().enumerate() {
        assert!(t <= budget, "sample {i} computed {t} times, budget {budget}");
        assert!(t >= 1, "sample {i} never seen");
    }
    assert_eq!(out.trained_batches, out.steps_taken, "one step per trained batch");
    assert_eq!(out.records.len(), target.len().div_ceil(cfg.batch_size));
    assert!(!out.online_first_pass_acc.is_nan());
    for r in &out.records {
        assert!(!r.acc.is_nan(), "every streaming row carries first-sight accuracy");
    }
}

#[test]
fn streaming_handles_a_trailing_singleton() {
    let mut cfg = tiny_config();
    cfg.batch_size = 127;
    let (source, target) = tiny_data();
    let state = source_state(&cfg, &source);
    let out = adapt_online(&cfg, &state, &target, None, None).unwrap();
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.steps_taken, 1, "singleton chunk must not step");
    assert_eq!(out.touches[127], 1, "straggler is scored once, never trained");
    let last = out.records.last().unwrap();
    assert!(last.l_total.is_nan());
    assert!(!last.acc.is_nan());
}

#[test]
fn baseline_mode_uses_everything_and_no_schedule() {
    let mut cfg = tiny_config();
    cfg.all_pseudo_baseline = true;
    cfg.epochs = 1;
    let (source, target) = tiny_data();
    let state = source_state(&cfg, &source);
    let out = adapt(&cfg, &state, &target, None, None).unwrap();
    for r in &out.records {
        assert_eq!(r.sel_frac, 1.0);
        assert!(r.mu_r.is_nan());
        assert!(r.l_prop.is_nan());
        assert!(r.l_con.is_nan());
        assert_eq!(r.l_total.to_bits(), r.l_ce.to_bits());
    }
}

#[test]
fn dense_map_adaptation_trains_only_normalization_layers() {
    let mut cfg = tiny_config();
    cfg.num_classes = 2;
    cfg.input_dim = 2;
    cfg.epochs = 2;
    cfg.map_height = 8;
    cfg.map_width = 8;
    cfg.maps_per_batch = 2;
    let spec = MapSpec {
        map_height: 8,
        map_width: 8,
        cell: 4,
        source_maps: 6,
        target_maps: 4,
        noise_sigma: 0.8,
        shift: Shift::Rotation { degrees: 30.0 },
        ..Default::default()
    };
    let (source, target) = generate_maps(&spec).unwrap();
    let state = source_state(&cfg, &source);
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("seg.csfd");
    let out = adapt_segmentation(&cfg, &state, &target, Some(&out_path), None).unwrap();
    let adapted = load_checkpoint(&out_path).unwrap();
    let frozen = |name: &str| !(name.starts_with("bn.") || name.contains("running"));
    let mut bn_changed = false;
    for ((an, ad, av), (bn_, bd, bv)) in adapted.iter().zip(&state) {
        assert_eq!(an, bn_);
        assert_eq!(ad, bd);
        if frozen(an) {
            assert_eq!(av, bv, "{an} must stay frozen under the normalization-only mask");
        } else if av != bv {
            bn_changed = true;
        }
    }
    assert!(bn_changed, "normalization parameters must actually move");
    for r in &out.records {
        assert!(r.l_prop.is_nan());
        assert!(r.l_con.is_nan());
        assert!(!r.l_ent.is_nan());
        assert!(r.mu_r.is_nan());
        assert!(!r.mu_c.is_nan(), "entropy weight is logged in the mu_c column");
    }
}
