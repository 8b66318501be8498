//! Configurations of the reference figures, embedded in the binary.

macro_rules! canonical {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../configs/", $name, ".toml")))),*]
    };
}

pub const CONFIGS: &[(&str, &str)] = canonical!(
    "fig1a", "fig1b", "fig1c", "fig1d",
    "fig2a", "fig2b", "fig2c", "fig2d",
    "fig2a_m10", "fig2b_m10", "fig2c_m10", "fig2d_m10",
    "fig3a", "fig3b", "fig3c", "fig3d",
    "fig4",
    "fig5_spde", "fig5_evidence",
);

pub const FIGURES: &[&str] = &["fig1", "fig2", "fig3", "fig4", "fig5"];

pub fn config_text(name: &str) -> Option<&'static str> {
    CONFIGS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Panel names of a figure, in display order.
pub fn figure_panels(figure: &str) -> Option<Vec<&'static str>> {
    if !FIGURES.contains(&figure) {
        return None;
    }
    Some(
        CONFIGS
            .iter()
            .map(|(n, _)| *n)
            .filter(|n| n.strip_prefix(figure).is_some_and(|rest| rest.is_empty() || !rest.starts_with(char::is_numeric)))
            .collect(),
    )
}

pub fn load(name: &str) -> crate::Result<crate::ExperimentConfig> {
    let text = config_text(name).ok_or_else(|| crate::Error::Config(format!("unknown canonical configuration {name:?}")))?;
    crate::ExperimentConfig::from_toml(text)
}
