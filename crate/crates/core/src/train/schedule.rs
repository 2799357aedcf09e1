use crate::error::{Error, Result};

/// Polynomial decay: `lr0 * (1 - step / total_steps) ^ power`.
pub fn lr_schedule(step: usize, total_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Parameter("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Parameter(format!("step {step} exceeds total_steps {total_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}
