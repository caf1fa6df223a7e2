use mscnn_core::gradsuite::probe_network;
use mscnn_core::loss::{total_loss, BranchTerms};
use mscnn_core::network::MsCnn;
use mscnn_core::tensor::Tensor;
use mscnn_core::train::{ignore, lr_at, train_joint, train_proposal, LogRow, TrainConfig};
use mscnn_core::{BBox, Error, GroundTruth, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenes(n: usize, seed: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut image = Tensor::uniform(&[1, 3, 64, 64], -0.3, 0.3, &mut rng);
            let (w, h) = (rng.gen_range(10.0..30.0), rng.gen_range(10.0..30.0));
            let (x, y) = (rng.gen_range(0.0..64.0 - w), rng.gen_range(0.0..64.0 - h));
            let bbox = BBox::from_corners(x, y, x + w, y + h);
            for c in 0..3 {
                for r in y as usize..(y + h) as usize {
                    for q in x as usize..(x + w) as usize {
                        image.data_mut()[(c * 64 + r) * 64 + q] = 0.5;
                    }
                }
            }
            Scene { image, objects: vec![GroundTruth { class: 1 + rng.gen_range(0..3), bbox }] }
        })
        .collect()
}

fn small_config() -> TrainConfig {
    let mut tc = TrainConfig::default();
    tc.crop_size = 64;
    tc.resize_scales = vec![1.0];
    tc.batch_size = 2;
    tc.stage1.iters = 3;
    tc.stage2.iters = 3;
    tc.joint.iters = 3;
    tc.joint.frozen_stages = 2;
    tc
}

fn net() -> MsCnn {
    probe_network(3).unwrap().0
}

fn snapshot(net: &MsCnn) -> Vec<(String, Vec<u64>)> {
    net.params().into_iter().map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

#[test]
fn same_seed_gives_identical_logs_and_parameters() {
    let data = scenes(4, 1);
    let run = || {
        let mut n = net();
        let log = train_proposal(&mut n, &data, &small_config(), &mut ignore).unwrap();
        (log, snapshot(&n))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let mut other = small_config();
    other.seed = 9;
    let c = train_proposal(&mut net(), &data, &other, &mut ignore).unwrap();
    assert_ne!(a, c);
}

#[test]
fn schedule_and_stage_switch_follow_the_config() {
    let mut tc = small_config();
    tc.stage1.iters = 4;
    tc.stage2.iters = 5;
    tc.stage2.decay_every = 2;
    let log = train_proposal(&mut net(), &scenes(3, 2), &tc, &mut ignore).unwrap();
    assert_eq!(log.len(), 9);
    for (i, row) in log.iter().enumerate() {
        let (stage, lr) = if i < 4 {
            ("stage1", lr_at(tc.stage1.lr, i, tc.stage1.decay_every, tc.stage1.decay_factor))
        } else {
            ("stage2", lr_at(tc.stage2.lr, i - 4, 2, 0.1))
        };
        assert_eq!(row.stage, stage);
        assert_eq!(row.lr, lr);
        assert_eq!(row.strategy, if i < 4 { tc.stage1.strategy } else { tc.stage2.strategy });
        assert_eq!(row.report.per_branch[0].terms.lambda, if i < 4 { 0.05 } else { 1.0 });
    }
    assert!((log[8].lr - tc.stage2.lr * 0.01).abs() < 1e-18);
}

#[test]
fn joint_training_leaves_the_frozen_prefix_untouched() {
    let mut n = net();
    let before = snapshot(&n);
    let frozen = n.trunk.convs_in_stages(2);
    let log = train_joint(&mut n, &scenes(4, 3), &small_config(), &mut ignore).unwrap();
    assert!(log.iter().all(|r| r.report.detection.is_some()));
    let after = snapshot(&n);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        let in_prefix = MsCnn::trunk_conv_index(name).is_some_and(|i| i < frozen);
        if in_prefix || n.is_fixed(name) {
            assert_eq!(a, b, "{name} changed");
        }
    }
    assert!(before.iter().zip(&after).any(|((name, a), (_, b))| name.starts_with("trunk") && a != b));
    assert!(before.iter().zip(&after).any(|((name, a), (_, b))| name.starts_with("head") && a != b));
}

#[test]
fn head_only_training_changes_only_the_head() {
    let mut n = net();
    let before = snapshot(&n);
    let mut tc = small_config();
    tc.joint.head_only = true;
    train_joint(&mut n, &scenes(4, 4), &tc, &mut ignore).unwrap();
    let mut head_changed = false;
    for ((name, a), (_, b)) in before.iter().zip(&snapshot(&n)) {
        if name.starts_with("head") {
            head_changed |= a != b;
        } else {
            assert_eq!(a, b, "{name} changed");
        }
    }
    assert!(head_changed);
}

#[test]
fn zero_detection_weight_reduces_to_the_proposal_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let mut t = || BranchTerms { cls: rng.gen_range(0.0..3.0), loc: rng.gen_range(0.0..2.0), lambda: 1.0, num_pos: 1, num_neg: 3 };
        let branches = [t(), t(), t(), t()];
        let det = t();
        let alphas = [0.9, 1.0, 1.0, 1.0];
        let joint = total_loss(&branches, &alphas, Some(det), 0.0).unwrap();
        let proposal = total_loss(&branches, &alphas, None, 1.0).unwrap();
        assert_eq!(joint.total, proposal.total);
    }
    // The same holds for logged training iterations.
    let mut tc = small_config();
    tc.joint.alpha_det = 0.0;
    let log = train_joint(&mut net(), &scenes(3, 5), &tc, &mut ignore).unwrap();
    for row in &log {
        let props: f64 = row.report.per_branch.iter().map(|w| w.alpha * w.terms.value()).sum();
        assert!((row.report.total - props).abs() < 1e-12 * props.max(1.0));
    }
}

#[test]
fn divergence_aborts_training() {
    let mut tc = small_config();
    tc.divergence_factor = 1e-6;
    match train_proposal(&mut net(), &scenes(3, 6), &tc, &mut ignore) {
        Err(Error::Diverged { iteration, .. }) => assert_eq!(iteration, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn observer_sees_every_iteration_and_can_stop_training() {
    let mut seen = Vec::new();
    let mut obs = |r: &LogRow, _: &MsCnn| {
        seen.push(r.iteration);
        if r.iteration == 2 {
            return Err(Error::Invalid("stop".into()));
        }
        Ok(())
    };
    assert!(train_proposal(&mut net(), &scenes(3, 7), &small_config(), &mut obs).is_err());
    assert_eq!(seen, vec![0, 1, 2]);
}

#[test]
fn csv_lines_match_the_header() {
    let log = train_joint(&mut net(), &scenes(3, 8), &small_config(), &mut ignore).unwrap();
    let names: Vec<String> = (0..4).map(|i| format!("b{i}")).collect();
    let header = LogRow::csv_header(&names, true);
    for row in &log {
        assert_eq!(row.csv_line(true).split(',').count(), header.split(',').count());
    }
}
