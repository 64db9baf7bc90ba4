mod common;

use common::*;
use diffcore::{Array, Graph};
use postermaker::genmodel::{self, CondBatch, TextBatch};
use postermaker::glyphrep::{self, Representation};
use postermaker::pipeline::config_diff;
use postermaker::trainer::{self, Stage};

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s[s.len() / 2]
}

#[test]
fn stages_chain_and_freeze_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train", 24, &small_synth());
    let base = trainer::run_stage(&stage(Stage::Base, &data, &dir.path().join("base"), None, 3)).unwrap();
    let inp = trainer::run_stage(&stage(Stage::Inpaint, &data, &dir.path().join("inp"), Some(base.checkpoint.clone()), 3)).unwrap();
    // branch copy: scene blocks start from the base blocks
    let (inp_ps, _) = trainer::load_model(&inp.checkpoint).unwrap();
    assert_eq!(inp_ps.get("base.blocks.0.x.qkv.w").unwrap(), base.params.get("base.blocks.0.x.qkv.w").unwrap());

    let s1 = trainer::run_stage(&stage(Stage::One, &data, &dir.path().join("s1"), Some(inp.checkpoint.clone()), 3)).unwrap();
    for (name, p) in inp_ps.iter() {
        let after = s1.params.get(name).unwrap();
        if name.starts_with("scene.") || name.starts_with("base.") {
            assert_eq!(after, &p.value, "{name} changed in stage 1");
        }
    }
    assert_ne!(s1.params.get("text.zero.0.w").unwrap(), inp_ps.get("text.zero.0.w").unwrap());
    assert_eq!(s1.meta.stages, vec![Stage::Base, Stage::Inpaint, Stage::One]);

    let s2 = trainer::run_stage(&stage(Stage::Two, &data, &dir.path().join("s2"), Some(s1.checkpoint.clone()), 2)).unwrap();
    for (name, p) in s1.params.iter() {
        if !name.starts_with("scene.") {
            assert_eq!(s2.params.get(name).unwrap(), &p.value, "{name} changed in stage 2");
        }
    }
    assert!(std::fs::read_to_string(dir.path().join("s2/train_log.jsonl")).unwrap().lines().count() >= 2);
}

#[test]
fn stage_two_requires_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train", 8, &small_synth());
    let mut cfg = stage(Stage::Two, &data, &dir.path().join("s2"), None, 1);
    cfg.from_scratch = false;
    let err = trainer::run_stage(&cfg).unwrap_err();
    assert!(err.is_validation(), "{err}");

    let base = trainer::run_stage(&stage(Stage::Base, &data, &dir.path().join("base"), None, 1)).unwrap();
    cfg.init = Some(base.checkpoint.clone());
    assert!(trainer::run_stage(&cfg).unwrap_err().is_validation());
    cfg.from_scratch = true;
    trainer::run_stage(&cfg).unwrap();

    cfg.init = Some(dir.path().join("missing.ckpt"));
    assert!(trainer::run_stage(&cfg).unwrap_err().is_validation());
    let empty = dir.path().join("nothing");
    assert!(trainer::run_stage(&stage(Stage::Base, &empty, &dir.path().join("x"), None, 1)).unwrap_err().is_validation());
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train", 16, &small_synth());
    let a = trainer::run_stage(&stage(Stage::Base, &data, &dir.path().join("a"), None, 4)).unwrap();
    let b = trainer::run_stage(&stage(Stage::Base, &data, &dir.path().join("b"), None, 4)).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());
}

#[test]
fn loss_trends_down_over_500_steps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train", 64, &small_synth());
    let mut cfg = stage(Stage::Base, &data, &dir.path().join("base"), None, 500);
    cfg.log_every = 50;
    let out = trainer::run_stage(&cfg).unwrap();
    let (first, last) = (median(&out.losses[..100]), median(&out.losses[400..]));
    assert!(last < first, "median loss {first} -> {last}");
}

#[test]
fn masked_pixels_have_zero_gradient() {
    let cfg = genmodel::check_config();
    let mut ps = genmodel::init_model::<f64>(&cfg, 2).unwrap();
    let names: Vec<String> = ps.names().map(String::from).collect();
    for (k, n) in names.iter().enumerate() {
        for (i, v) in ps.get_mut(n).unwrap().data_mut().iter_mut().enumerate() {
            *v += 0.05 * (((i * 31 + k * 7) % 19) as f64 / 9.0 - 1.0);
        }
    }
    let s = cfg.image_size;
    let t = 0.4;
    let cb = CondBatch { t: vec![t], prompt_ids: vec![vec![1, 2]], prompt_dropped: vec![false], text: None, scene: None };
    let x0 = Array::from_fn(&[1, s, s, 3], |i| ((i * 13 % 17) as f64 / 8.5) - 1.0);
    let eps = Array::from_fn(&[1, s, s, 3], |i| ((i * 7 % 5) as f64 - 2.0) / 2.0);
    // weight zero over a 4x4 excluded box
    let weight = Array::from_fn(&[1, s, s, 1], |i| if (i % s) < 4 && (i / s) < 4 { 0.0 } else { 1.0 });
    let loss = |pix: usize, h: f64| {
        // moves the regression target at `pix` while keeping the noisy input fixed
        let (mut x, mut e) = (x0.clone(), eps.clone());
        x.data_mut()[pix] += h * t;
        e.data_mut()[pix] -= h * (1.0 - t);
        let mut g = Graph::new();
        let l = genmodel::flow_loss_at(&mut g, &ps, &cfg, &x, &e, &cb, None, Some(&weight)).unwrap();
        g.value(l).item()
    };
    let h = 1e-4;
    let masked = (2 * s + 1) * 3 + 1;
    let fd = (loss(masked, h) - loss(masked, -h)) / (2.0 * h);
    assert!(fd.abs() < 1e-9, "masked pixel gradient {fd}");
    let open = (10 * s + 10) * 3;
    let fd = (loss(open, h) - loss(open, -h)) / (2.0 * h);
    assert!(fd.abs() > 1e-6, "open pixel gradient {fd}");
}

#[test]
fn line_baseline_pools_one_token_per_line() {
    let synth = small_synth();
    let s = postermaker::datasynth::synth_sample(5, &synth).or_else(|_| postermaker::datasynth::synth_sample(6, &synth)).unwrap();
    let tb = TextBatch::new(&[&s.text], &[false], Representation::Line, 8).unwrap();
    assert_eq!(tb.len, s.text.lines.len());
    assert_eq!(glyphrep::num_tokens(&s.text, Representation::Char), s.text.num_chars());

    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "train", 8, &synth);
    let c = stage(Stage::One, &data, &dir.path().join("s1"), None, 2);
    let line = trainer::StageConfig { representation: Representation::Line, ..c.clone() };
    assert_eq!(config_diff(&c, &line).unwrap(), vec!["representation".to_string()]);
    let out = trainer::run_line_level_baseline(&c).unwrap();
    assert_eq!(out.meta.model.representation, Representation::Line);
}
