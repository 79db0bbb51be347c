use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    None,
    Normal,
    Crowded,
}

impl Density {
    /// Unscaled (pedestrians, vehicles) of the reference benchmark.
    pub fn reference_counts(self) -> (usize, usize) {
        match self {
            Density::None => (0, 0),
            Density::Normal => (50, 15),
            Density::Crowded => (70, 70),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Cloudy,
    WetSunset,
    SoftRainSunset,
}

impl Weather {
    pub const TRAIN: [Weather; 2] = [Weather::Clear, Weather::Cloudy];
    pub const HELD_OUT: [Weather; 2] = [Weather::WetSunset, Weather::SoftRainSunset];

    pub fn is_held_out(self) -> bool {
        Weather::HELD_OUT.contains(&self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::Cloudy => "cloudy",
            Weather::WetSunset => "wet_sunset",
            Weather::SoftRainSunset => "soft_rain_sunset",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Pixels per metre.
    pub px_per_m: f64,
    /// Ego position as a fraction of image height from the top.
    pub ego_row: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { width: 96, height: 96, px_per_m: 3.0, ego_row: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub town: String,
    pub density: Density,
    pub weather: Weather,
    pub route_id: u64,
    /// Number of lanes in a sampled route.
    pub route_lanes: usize,
    /// Scripted pedestrians that cross in front of the ego along its route.
    pub jaywalkers: usize,
    pub density_scale: f64,
    pub mode: Mode,
    pub blocked_speed: f64,
    pub blocked_s: f64,
    /// Episode time limit; `None` derives it from the route length.
    pub time_limit_s: Option<f64>,
    pub render: RenderConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            town: "town01".into(),
            density: Density::None,
            weather: Weather::Clear,
            route_id: 0,
            route_lanes: 3,
            jaywalkers: 0,
            density_scale: 0.2,
            mode: Mode::Eval,
            blocked_speed: 0.1,
            blocked_s: 30.0,
            time_limit_s: None,
            render: RenderConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// Scaled (pedestrians, vehicles).
    pub fn actor_counts(&self) -> (usize, usize) {
        let (p, v) = self.density.reference_counts();
        let f = |n: usize| (n as f64 * self.density_scale).round() as usize;
        (f(p), f(v))
    }
}
