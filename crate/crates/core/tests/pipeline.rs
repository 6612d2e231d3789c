//! End-to-end run through the public API on a small synthetic task.

use classil_core::experiment::{run_experiment, RunPlan};
use classil_core::model::HeadMode;
use classil_core::nn::ExtractorSpec;
use classil_core::optim::LrSchedule;
use classil_core::toy::DeskSpec;
use classil_core::trainer::TrainConfig;

fn plan() -> RunPlan {
    RunPlan {
        base_count: 4,
        num_tasks: 3,
        class_order_seed: 5,
        seed: 2,
        memory_capacity: 24,
        extractor: ExtractorSpec::mlp(vec![16]),
        head: HeadMode::Cosine,
        cosine_scale_init: 10.0,
        train: TrainConfig {
            epochs_base: 5,
            epochs_incremental: 3,
            batch_size: 16,
            base_schedule: LrSchedule::Cosine { start: 0.1, end: 1e-3 },
            incremental_schedule: LrSchedule::Cosine { start: 0.01, end: 1e-4 },
            ..TrainConfig::default()
        },
        baseline_augment: None,
        ..RunPlan::default()
    }
}

#[test]
fn report_agrees_with_the_step_records() {
    let (train, test) = DeskSpec {
        num_classes: 10,
        num_superclasses: 2,
        dim: 8,
        train_per_class: 24,
        test_per_class: 10,
        ..DeskSpec::default()
    }
    .generate()
    .unwrap();
    let plan = plan();
    let r = run_experiment(&plan, &train, &test, &mut ()).unwrap();

    assert_eq!(r.steps.len(), 4);
    assert_eq!(r.models.len(), 4);
    let overall: Vec<f64> = r.steps.iter().map(|s| s.overall_accuracy).collect();
    assert_eq!(r.accuracy.overall(), &overall[..]);
    let mean = overall.iter().sum::<f64>() / overall.len() as f64;
    assert!((r.report.avg_acc - mean).abs() < 1e-9);
    let first = r.accuracy.entry(0, 0).unwrap();
    let last = r.accuracy.row(3).unwrap()[0];
    assert_eq!(r.report.forgetting, first - last);
    assert!((0.0..=1.0).contains(&r.report.ece));

    for (step, rec) in r.steps.iter().enumerate() {
        assert_eq!(rec.step, step);
        assert_eq!(rec.task_accuracy.len(), step + 1);
        assert_eq!(rec.new_classes, r.schedule.task_classes(step).unwrap());
        let dump = rec.memory.as_ref().expect("memory is dumped every step");
        let seen = r.schedule.seen_classes(step).unwrap().len();
        assert_eq!(dump.per_class, plan.memory_capacity / seen);
        assert_eq!(dump.sets.len(), seen);
        assert!(dump.sets.values().map(Vec::len).sum::<usize>() <= plan.memory_capacity);
    }
    let last = r.steps.last().unwrap();
    if let (Some(gap), Some(o), Some(n)) = (r.report.weight_norm_gap, last.weight_norm_old, last.weight_norm_new) {
        assert!((gap - (o - n).abs()).abs() < 1e-12);
    }
}
