//! Whole-network gradient verification through the finite-difference
//! oracle, including planted-bug detection and step robustness.

use ofsnet::data::{generate_planted, Dataset, PlantedConfig};
use ofsnet::gradcheck::{check_report, finite_diff, CheckOptions, PerturbationTarget, TargetKind};
use ofsnet::network::{
    ConvLayerSpec, FilterMode, LossConfig, Network, NetworkSpec, OptimizerConfig, PoolSpec,
};
use ofsnet::tensor::Tensor;

fn tiny_data() -> Dataset {
    generate_planted(&PlantedConfig {
        resolution: (8, 8),
        positive_extent: 3,
        negative_extent: 1,
        blobs_per_image: 1,
        noise_sigma: 0.4,
        n_samples: 6,
        seed: 21,
    })
    .unwrap()
}

fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        input_resolution: (8, 8),
        conv_layers: vec![
            ConvLayerSpec {
                out_channels: 2,
                mode: FilterMode::Learned { initial_k: 4.0, k_min: 1.0, k_max: 11.0 },
                pool_after: true,
            },
            ConvLayerSpec {
                out_channels: 2,
                mode: FilterMode::Fixed { size: 3 },
                pool_after: false,
            },
        ],
        pool: PoolSpec { window: 2, stride: 2 },
        fc_nodes: 6,
        loss: LossConfig { positive_weight: 1.3 },
    }
}

fn probe_batch(data: &Dataset, n: usize) -> (Tensor, Vec<u8>) {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    data.batch(&idx)
}

#[test]
fn untrained_tiny_network_passes() {
    let data = tiny_data();
    let (x, y) = probe_batch(&data, 4);
    let mut net = Network::new(&tiny_spec(), 11).unwrap();
    let report = check_report(&mut net, &x, &y, &CheckOptions::default()).unwrap();
    assert!(
        report.pass,
        "max rel err {:.3e} at {:?}",
        report.max_rel_err, report.worst_target
    );
    assert!(report.checked >= 200);
    // All learned sizes and all biases were swept.
    let size_targets = report.entries.iter().filter(|e| e.target.ends_with("size_k")).count();
    assert_eq!(size_targets, 1);
}

#[test]
fn corrupted_size_gradient_is_flagged() {
    let data = tiny_data();
    let (x, y) = probe_batch(&data, 4);
    let mut net = Network::new(&tiny_spec(), 11).unwrap();
    let opts = CheckOptions { corrupt_size_grad: true, ..CheckOptions::default() };
    let report = check_report(&mut net, &x, &y, &opts).unwrap();
    assert!(!report.pass);
    let worst = report.worst_target.unwrap();
    assert!(worst.ends_with("size_k"), "worst target {worst}");
}

#[test]
fn report_does_not_depend_on_learning_rates() {
    // Gradients are functions of the state only; two configs differing in
    // size_lr produce identical reports.
    let data = tiny_data();
    let (x, y) = probe_batch(&data, 4);
    let _opt_a = OptimizerConfig { size_lr: 0.0, ..OptimizerConfig::default() };
    let _opt_b = OptimizerConfig { size_lr: 1.0, ..OptimizerConfig::default() };
    let mut net_a = Network::new(&tiny_spec(), 13).unwrap();
    let mut net_b = Network::new(&tiny_spec(), 13).unwrap();
    let ra = check_report(&mut net_a, &x, &y, &CheckOptions::default()).unwrap();
    let rb = check_report(&mut net_b, &x, &y, &CheckOptions::default()).unwrap();
    assert_eq!(ra.max_rel_err, rb.max_rel_err);
    assert_eq!(ra.checked, rb.checked);
    for (ea, eb) in ra.entries.iter().zip(&rb.entries) {
        assert_eq!(ea.target, eb.target);
        assert_eq!(ea.analytic, eb.analytic);
        assert_eq!(ea.numeric, eb.numeric);
    }
}

#[test]
fn size_probe_crossing_the_interval_is_rejected() {
    let data = tiny_data();
    let (mut x, y) = probe_batch(&data, 2);
    let mut net = Network::new(&tiny_spec(), 17).unwrap();
    // k = 4.0 sits mid-interval; a probe of half-width 1.1 crosses it.
    let target = PerturbationTarget { kind: TargetKind::SizeK { layer: 0 }, h: 1.1 };
    let err = finite_diff(&mut net, &mut x, &y, &target).unwrap_err();
    assert!(err.to_string().contains("interval"), "{err}");
}

#[test]
fn derivative_is_stable_across_step_sizes_on_smooth_targets() {
    let data = tiny_data();
    let (mut x, y) = probe_batch(&data, 4);
    let mut net = Network::new(&tiny_spec(), 19).unwrap();
    // The size parameter and a bias are smooth targets (the loss is smooth
    // in both wherever no rectifier mask flips).
    for kind in [TargetKind::SizeK { layer: 0 }, TargetKind::Bias { layer: 0, channel: 0 }] {
        let mut values = Vec::new();
        for h in [1e-4, 1e-5, 1e-6] {
            let probe = finite_diff(
                &mut net,
                &mut x,
                &y,
                &PerturbationTarget { kind: kind.clone(), h },
            )
            .unwrap();
            assert!(!probe.kink_crossed);
            values.push(probe.derivative);
        }
        let scale = values[0].abs().max(1e-6);
        for pair in values.windows(2) {
            assert!(
                (pair[0] - pair[1]).abs() / scale < 1e-4,
                "{kind:?}: {values:?}"
            );
        }
    }
}

#[test]
fn finite_diff_restores_the_perturbed_value_exactly() {
    let data = tiny_data();
    let (mut x, y) = probe_batch(&data, 2);
    let mut net = Network::new(&tiny_spec(), 23).unwrap();
    let before = net.batch_loss(&x, &y).unwrap();
    for kind in [
        TargetKind::SizeK { layer: 0 },
        TargetKind::Bias { layer: 0, channel: 1 },
        TargetKind::FilterWeight { layer: 0, index: 3 },
        TargetKind::Input { index: 5 },
    ] {
        finite_diff(&mut net, &mut x, &y, &PerturbationTarget { kind, h: 1e-5 }).unwrap();
        let after = net.batch_loss(&x, &y).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }
}
