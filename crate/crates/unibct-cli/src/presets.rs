//! Named preset configs: one per scenario/loss pairing at desk scale.

use anyhow::{bail, Result};

use unibct::{CompatLossKind, CompatLossSpec, ExperimentConfig, Scenario};

use crate::loss_name;

const LOSSES: [CompatLossKind; 5] = [
    CompatLossKind::UniBct,
    CompatLossKind::UniBctVanilla,
    CompatLossKind::Bct,
    CompatLossKind::Regress,
    CompatLossKind::Contrastive,
];

/// Resolves `<scenario>-<loss>` to a desk-scale config.
///
/// Illegal pairings (BCT on an open-set scenario) fail the config's own
/// validation, so they are rejected here, before any compute.
pub fn preset_config(name: &str) -> Result<ExperimentConfig> {
    for scenario in Scenario::ALL {
        let prefix = scenario.to_string();
        let Some(rest) = name
            .strip_prefix(prefix.as_str())
            .and_then(|r| r.strip_prefix('-'))
        else {
            continue;
        };
        let Some(kind) = LOSSES.into_iter().find(|&k| loss_name(k) == rest) else {
            bail!(
                "unknown loss {rest:?} in preset {name:?}; expected one of {}",
                LOSSES.map(loss_name).join(", ")
            );
        };
        let mut config = ExperimentConfig::default();
        config.scenario = scenario;
        config.loss = CompatLossSpec::new(kind);
        config.validate()?;
        return Ok(config);
    }
    bail!(
        "unknown preset {name:?}; expected <scenario>-<loss> with scenario one of {} and loss one of {}",
        Scenario::ALL.map(|s| s.to_string()).join(", "),
        LOSSES.map(loss_name).join(", ")
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_grid_pairing_resolves() {
        for scenario in Scenario::ALL {
            for kind in LOSSES {
                let name = format!("{scenario}-{}", loss_name(kind));
                let legal = kind != CompatLossKind::Bct || scenario.same_class_set();
                match preset_config(&name) {
                    Ok(config) => {
                        assert!(legal, "{name} should have been rejected");
                        assert_eq!(config.scenario, scenario);
                        assert_eq!(config.loss.kind, kind);
                    }
                    Err(_) => assert!(!legal, "{name} should resolve"),
                }
            }
        }
    }

    #[test]
    fn junk_names_are_rejected_with_the_grammar() {
        let err = preset_config("extended-data-foo").unwrap_err().to_string();
        assert!(err.contains("unknown loss"), "got: {err}");
        for name in ["extended-data", "nonsense-unibct"] {
            let err = preset_config(name).unwrap_err().to_string();
            assert!(err.contains("expected <scenario>-<loss>"), "got: {err}");
        }
    }
}
