//! Experiment config files: one TOML table per experiment, each holding
//! any subset of the grid fields.
//!
//! ```toml
//! [poisson]
//! ks = [8]
//! betas = [1.0, 0.5]
//!
//! [hard_block]
//! eta = 1e6
//! ```

use std::path::Path;

use hodlr_core::{Error, Result};
use serde::Deserialize;

use crate::experiments::{Experiment, Grid, GridOverrides};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub poisson: Option<GridOverrides>,
    pub kernel: Option<GridOverrides>,
    pub hard_block: Option<GridOverrides>,
    pub exp_hard: Option<GridOverrides>,
    pub recovery: Option<GridOverrides>,
    pub bound_checks: Option<GridOverrides>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn section(&self, exp: Experiment) -> Option<&GridOverrides> {
        match exp {
            Experiment::Poisson => self.poisson.as_ref(),
            Experiment::Kernel => self.kernel.as_ref(),
            Experiment::HardBlock => self.hard_block.as_ref(),
            Experiment::ExpHard => self.exp_hard.as_ref(),
            Experiment::Recovery => self.recovery.as_ref(),
            Experiment::BoundChecks => self.bound_checks.as_ref(),
        }
    }
}

/// Defaults, then the file's section, then command-line flags.
pub fn resolve(exp: Experiment, file: Option<&ConfigFile>, cli: &GridOverrides) -> Grid {
    let mut grid = Grid::defaults(exp);
    if let Some(section) = file.and_then(|f| f.section(exp)) {
        section.apply(&mut grid);
    }
    cli.apply(&mut grid);
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::Preset;

    #[test]
    fn layering() {
        let file = ConfigFile::parse(
            r#"
            [kernel]
            ks = [4, 8]
            presets = ["GN2"]
            trials = 3

            [poisson]
            seed = 99
            "#,
        )
        .unwrap();
        let cli = GridOverrides { trials: Some(5), ..Default::default() };
        let g = resolve(Experiment::Kernel, Some(&file), &cli);
        assert_eq!(g.ks, vec![4, 8]);
        assert_eq!(g.presets, vec![Preset::GN2]);
        assert_eq!(g.trials, 5);
        assert_eq!(g.seed, 0);
        assert_eq!(resolve(Experiment::Poisson, Some(&file), &GridOverrides::default()).seed, 99);
        assert_eq!(resolve(Experiment::Recovery, None, &GridOverrides::default()), Grid::defaults(Experiment::Recovery));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ConfigFile::parse("[kernel]\nkz = [1]\n").is_err());
        assert!(ConfigFile::parse("[nope]\n").is_err());
        assert!(ConfigFile::parse("[kernel]\npresets = [\"GN9\"]\n").is_err());
    }
}
