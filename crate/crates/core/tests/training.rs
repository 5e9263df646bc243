use gradformer::harness::experiment::{first_position_attention, hiercopy_experiment, poly_experiment, run_experiment};
use gradformer::harness::props::regularizer_ab;
use gradformer::harness::tasks::{gen_task, TaskKind};
use gradformer::graded_transformer::GradedModel;
use gradformer::training::TrainMode;

#[test]
fn grade_penalty_shrinks_grades_on_a_zero_signal_task() {
    let (with, without) = regularizer_ab(42, 150, 1.0).unwrap();
    assert!(with < without, "with γ: {with}, without: {without}");
}

#[test]
fn hiercopy_egt_attends_to_the_head_token() {
    let mut cfg = hiercopy_experiment(TrainMode::Egt);
    cfg.train.steps = 800;
    let rep = run_experiment(&cfg, None).unwrap();
    let eval = gen_task(TaskKind::Hiercopy, 64, cfg.task.len, 7).unwrap();
    let trained = first_position_attention(&rep.graded_outcome.model, &eval).unwrap();
    let init = first_position_attention(&GradedModel::init(cfg.model.clone(), cfg.train.seed).unwrap(), &eval).unwrap();
    let uniform = 1.0 / cfg.task.len as f64;
    assert!(trained > uniform && trained > init, "trained {trained}, init {init}, uniform {uniform}");
    let acc = rep.graded.final_eval.unwrap().accuracy.unwrap();
    assert!(acc > 0.9, "accuracy {acc}");
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let mut cfg = poly_experiment(TrainMode::Egt);
    cfg.train.steps = 40;
    cfg.task.size = 64;
    let a = run_experiment(&cfg, None).unwrap();
    let b = run_experiment(&cfg, None).unwrap();
    assert_eq!(a.graded_outcome.model, b.graded_outcome.model);
    assert_eq!(a.graded_outcome.metrics, b.graded_outcome.metrics);
}

#[test]
fn baseline_twin_runs_alongside() {
    let mut cfg = poly_experiment(TrainMode::Lgt);
    cfg.train.steps = 30;
    cfg.task.size = 32;
    cfg.baseline = true;
    let rep = run_experiment(&cfg, None).unwrap();
    let base = rep.baseline.unwrap();
    assert_eq!(base.steps, 30);
    assert!(base.initial.loss.is_finite() && rep.graded.initial.loss.is_finite());
}
