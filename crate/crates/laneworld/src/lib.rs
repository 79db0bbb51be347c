//! Lane world: a deterministic top-down driving simulator with traffic
//! lights, NPC traffic, pedestrians, an egocentric renderer and a scripted
//! expert driver. Ticks run at 10 Hz.

pub mod command;
pub mod events;
pub mod expert;
pub mod geom;
pub mod layout;
pub mod render;
pub mod route;
pub mod scenario;
pub mod world;

pub use command::{CommandState, NavCommand};
pub use events::{DrivingEvent, EventKind};
pub use expert::Expert;
pub use geom::Vec2;
pub use layout::{Layout, LayoutError, LightState, Turn};
pub use render::{render, Frame};
pub use route::{Path, Route};
pub use scenario::{Density, Mode, RenderConfig, ScenarioConfig, Weather};
pub use world::{next_command, spawn_scenario, Action, World, WorldError, DT};
