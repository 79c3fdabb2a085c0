use std::io::{self, Write};

use super::{CvResult, EpochLog};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_training_log(w: &mut impl Write, log: &[EpochLog]) -> io::Result<()> {
    writeln!(w, "epoch,l_ce,l_distill,l_norm,l_imp,total,val_loss,val_acc,val_bca,val_f1")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.l_ce,
            r.l_distill,
            r.l_norm,
            opt(r.l_imp),
            r.total,
            opt(r.val_loss),
            opt(r.val_acc),
            opt(r.val_bca),
            opt(r.val_f1)
        )?;
    }
    Ok(())
}

/// One row per (variant, fold, repeat).
pub fn write_results_csv(w: &mut impl Write, suite: &str, rows: &[(String, &CvResult)]) -> io::Result<()> {
    writeln!(w, "suite,variant,fold,repeat,acc,bca,weighted_f1,trial_acc,trial_bca")?;
    for (variant, res) in rows {
        for e in &res.entries {
            writeln!(
                w,
                "{suite},{variant},{},{},{},{},{},{},{}",
                e.fold, e.repeat, e.metrics.acc, e.metrics.bca, e.metrics.weighted_f1, e.trial_metrics.acc, e.trial_metrics.bca
            )?;
        }
    }
    Ok(())
}

pub fn write_aggregate_csv(w: &mut impl Write, suite: &str, rows: &[(String, &CvResult)]) -> io::Result<()> {
    writeln!(w, "suite,variant,runs,acc_mean,acc_std,bca_mean,bca_std,weighted_f1_mean,weighted_f1_std,trial_bca_mean,trial_bca_std")?;
    for (variant, r) in rows {
        writeln!(
            w,
            "{suite},{variant},{},{},{},{},{},{},{},{},{}",
            r.entries.len(),
            r.acc.mean,
            r.acc.std,
            r.bca.mean,
            r.bca.std,
            r.weighted_f1.mean,
            r.weighted_f1.std,
            r.trial_bca.mean,
            r.trial_bca.std
        )?;
    }
    Ok(())
}
