use std::fmt::Write as _;

use anyhow::{bail, Result};
use itl_core::metrics::topk_next_states;
use itl_core::Dynamics;

/// Top-k next states of one (state, action) pair under several models.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    pub state: usize,
    pub action: usize,
    /// Per model, `(next state, probability)` in rank order.
    pub columns: Vec<(String, Vec<(usize, f64)>)>,
}

pub fn report_counterfactual(models: &[(String, Dynamics)], state: usize, action: usize, k: usize) -> Result<Counterfactual> {
    let Some((_, first)) = models.first() else {
        bail!("no models to compare");
    };
    if let Some((name, _)) = models.iter().find(|(_, t)| !t.same_shape(first)) {
        bail!("model {name} has a different shape from the others");
    }
    let columns = models
        .iter()
        .map(|(name, t)| Ok((name.clone(), topk_next_states(t, state, action, k)?)))
        .collect::<Result<_>>()?;
    Ok(Counterfactual { state, action, columns })
}

impl Counterfactual {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "top next states for state {}, action {}", self.state, self.action);
        let _ = write!(s, "{:<6}", "rank");
        for (name, _) in &self.columns {
            let _ = write!(s, "{name:<18}");
        }
        s.push('\n');
        let depth = self.columns.iter().map(|c| c.1.len()).max().unwrap_or(0);
        for rank in 0..depth {
            let _ = write!(s, "{:<6}", rank + 1);
            for (_, col) in &self.columns {
                match col.get(rank) {
                    Some((sp, p)) => {
                        let _ = write!(s, "{:<18}", format!("{sp} ({p:.4})"));
                    }
                    None => {
                        let _ = write!(s, "{:<18}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "state", "action", "rank", "next_state", "probability"])?;
        for (name, col) in &self.columns {
            for (rank, (sp, p)) in col.iter().enumerate() {
                w.write_record([
                    name.clone(),
                    self.state.to_string(),
                    self.action.to_string(),
                    (rank + 1).to_string(),
                    sp.to_string(),
                    p.to_string(),
                ])?;
            }
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}
