use super::{TrainConfig, TrainState};

/// Applies one epoch's validation AUC to the plateau schedule.
///
/// An AUC above `best + min_delta` (or any AUC when there is no best yet) is
/// an improvement and resets the counter. Otherwise the counter grows; when it
/// reaches the patience the rate drops by `plateau_factor`, never below
/// `lr_floor`, and the counter restarts.
pub fn plateau_step(state: &TrainState, val_auc: f64, config: &TrainConfig) -> TrainState {
    let mut next = state.clone();
    let improved = match state.best_val_auc {
        None => true,
        Some(best) => val_auc > best + config.min_delta,
    };
    if improved {
        next.best_val_auc = Some(val_auc);
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
        if next.epochs_since_improvement >= config.plateau_patience {
            let lr = (state.current_lr * config.plateau_factor).max(config.lr_floor);
            // repeated multiplication lands an ulp or so off the floor
            next.current_lr = if (lr - config.lr_floor).abs() <= config.lr_floor * 1e-9 { config.lr_floor } else { lr };
            next.epochs_since_improvement = 0;
        }
    }
    next
}
