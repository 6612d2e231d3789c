//! Canned experiment grids. A recipe is a pure expansion of a base config
//! into labelled variants; running them is the runner's job.

use classil_core::losses::SoftmaxMode;
use classil_core::model::HeadMode;
use classil_core::regularizers::Regularizer;
use classil_core::trainer::ClassifierKind;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Recipe names with the aliases the CLI also accepts.
pub const RECIPES: &[(&str, &[&str])] = &[
    ("desk", &[]),
    ("ablation", &["ablation-fig4"]),
    ("regularizers", &["regularizers-table2"]),
    ("overfit", &["overfit-sec52"]),
    ("sota", &[]),
    ("icarl-parallels", &["icarl"]),
];

/// Label-smoothing strength and mixup concentration used by the
/// regularizer study (common defaults).
pub const LABEL_SMOOTHING: f64 = 0.1;
pub const MIXUP_ALPHA: f64 = 0.2;
/// Cutout side length for heavy augmentation on 32x32 images.
pub const HAUG_CUTOUT: usize = 8;

pub const OVERFIT_EPOCHS: usize = 500;
pub const OVERFIT_SNAPSHOT_EVERY: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    /// Every base-training checkpoint seeds its own class-IL run.
    #[serde(default)]
    pub from_snapshots: bool,
    pub variant: Vec<Variant>,
}

pub fn canonical_name(name: &str) -> Result<&'static str> {
    RECIPES
        .iter()
        .find(|(n, aliases)| *n == name || aliases.contains(&name))
        .map(|(n, _)| *n)
        .ok_or_else(|| {
            let known: Vec<&str> = RECIPES.iter().map(|(n, _)| *n).collect();
            HarnessError::Config(format!("unknown recipe `{name}` (known: {})", known.join(", ")))
        })
}

/// File-system friendly form of a label: `Sep+LowLR+KD` becomes `sep-lowlr-kd`.
pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for c in label.replace("++", "pp").chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_string()
}

fn variant(label: &str, base: &ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig)) -> Variant {
    let mut config = base.clone();
    config.name = slug(label);
    edit(&mut config);
    Variant {
        label: label.to_string(),
        config,
    }
}

pub fn expand(name: &str, base: &ExperimentConfig) -> Result<Recipe> {
    let name = canonical_name(name)?;
    let mut from_snapshots = false;
    let variants = match name {
        "desk" => vec![variant("CCIL", base, |_| {})],
        "ablation" => ablation(base),
        "regularizers" => vec![
            variant("CCIL", base, |c| c.train.regularizer = Regularizer::None),
            variant("CCIL+SD", base, |c| c.train.regularizer = Regularizer::Sd),
            variant("CCIL+H-Aug", base, |c| {
                c.train.regularizer = Regularizer::HAug { cutout: HAUG_CUTOUT }
            }),
            variant("CCIL+LS", base, |c| {
                c.train.regularizer = Regularizer::Ls { epsilon: LABEL_SMOOTHING }
            }),
            variant("CCIL+Mixup", base, |c| {
                c.train.regularizer = Regularizer::Mixup { alpha: MIXUP_ALPHA }
            }),
        ],
        "overfit" => {
            from_snapshots = true;
            vec![variant("CCIL", base, |c| {
                c.train.epochs_base = OVERFIT_EPOCHS;
                c.train.snapshot_every = Some(OVERFIT_SNAPSHOT_EVERY);
            })]
        }
        "sota" => {
            let mut out = Vec::new();
            for tasks in [5, 10] {
                for (label, reg) in [("CCIL", Regularizer::None), ("CCIL+SD", Regularizer::Sd)] {
                    out.push(variant(&format!("{label} {tasks} tasks"), base, |c| {
                        c.num_tasks = tasks;
                        c.train.regularizer = reg;
                    }));
                }
            }
            out
        }
        "icarl-parallels" => icarl_parallels(base),
        _ => unreachable!("canonical names are exhaustive"),
    };
    Ok(Recipe {
        name: name.to_string(),
        from_snapshots,
        variant: variants,
    })
}

/// The 2x2x2 grid {Comb, Sep} x {base LR, low LR} x {no KD, KD} on a dot
/// head with adaptive weighting of the distillation term.
fn ablation(base: &ExperimentConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for kd in [false, true] {
        for (low_lr, mode) in [
            (false, SoftmaxMode::Comb),
            (false, SoftmaxMode::Sep),
            (true, SoftmaxMode::Comb),
            (true, SoftmaxMode::Sep),
        ] {
            let mut label = String::from(match mode {
                SoftmaxMode::Comb => "Comb",
                SoftmaxMode::Sep => "Sep",
            });
            if low_lr {
                label.push_str("+LowLR");
            }
            if kd {
                label.push_str("+KD");
            }
            out.push(variant(&label, base, |c| {
                c.head = HeadMode::Dot;
                c.train.softmax_mode = mode;
                c.train.low_lr = low_lr;
                c.train.kd_enabled = kd;
                c.train.adaptive_weighting = true;
                c.train.classifier = ClassifierKind::Cnn;
                c.train.regularizer = Regularizer::None;
            }));
        }
    }
    out
}

/// Comb baseline, iCaRL, iCaRL++ and CCIL built from the same components.
fn icarl_parallels(base: &ExperimentConfig) -> Vec<Variant> {
    let row = |label: &str, head: HeadMode, mode: SoftmaxMode, low_lr: bool, aw: bool, classifier: ClassifierKind, kd: bool| {
        variant(label, base, |c| {
            c.head = head;
            c.train.softmax_mode = mode;
            c.train.low_lr = low_lr;
            c.train.adaptive_weighting = aw;
            c.train.classifier = classifier;
            c.train.kd_enabled = kd;
            c.train.regularizer = Regularizer::None;
        })
    };
    use ClassifierKind::{Cnn, Nme};
    use HeadMode::{Cosine, Dot};
    use SoftmaxMode::{Comb, Sep};
    vec![
        row("Comb", Dot, Comb, false, false, Cnn, false),
        row("iCaRL", Dot, Comb, false, false, Nme, true),
        row("iCaRL++", Cosine, Comb, false, true, Cnn, true),
        row("CCIL", Cosine, Sep, true, true, Cnn, true),
    ]
}
