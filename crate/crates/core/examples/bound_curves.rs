use cdte::bench::{generate_synth, SettingKind, SynthSetting};
use cdte::learners::{train_learner, LearnerConfig, LearnerKind, LossKind};
use cdte::{EstimandKind, EvalGrid};

fn main() -> cdte::Result<()> {
    let data = generate_synth(&SynthSetting::new(SettingKind::Normal, 0), 500)?;
    let grid = EvalGrid::from_outcomes(
        &data.arm_outcomes(1),
        &data.arm_outcomes(0),
        50,  // effect values
        50,  // quantile levels
        200, // outcome search points
    )?;
    let config = LearnerConfig::new(LearnerKind::Au, EstimandKind::Cdf, LossKind::Crps, grid);
    let model = train_learner(&data, &config)?;
    let (bounds, _crossings) = model.predict(&[0.5, -0.2])?;
    for ((delta, lo), hi) in bounds.grid.iter().zip(&bounds.lower).zip(&bounds.upper) {
        println!("P(effect <= {delta:.2}) in [{lo:.3}, {hi:.3}]");
    }
    Ok(())
}
