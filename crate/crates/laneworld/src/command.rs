use serde::{Deserialize, Serialize};

use crate::layout::Turn;

/// High-level navigation instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NavCommand {
    Follow,
    Left,
    Right,
    Straight,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("malformed one-hot command vector {0:?}")]
pub struct OneHotError(pub Vec<f64>);

impl NavCommand {
    pub const ALL: [NavCommand; 4] = [NavCommand::Follow, NavCommand::Left, NavCommand::Right, NavCommand::Straight];

    pub fn index(self) -> usize {
        match self {
            NavCommand::Follow => 0,
            NavCommand::Left => 1,
            NavCommand::Right => 2,
            NavCommand::Straight => 3,
        }
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }

    /// Inverse of [`NavCommand::one_hot`]; rejects anything but an exact one-hot vector.
    pub fn from_one_hot(v: &[f64]) -> Result<NavCommand, OneHotError> {
        let ones: Vec<usize> = v.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect();
        let zeros = v.iter().filter(|&&x| x == 0.0).count();
        if v.len() != 4 || ones.len() != 1 || zeros != 3 {
            return Err(OneHotError(v.to_vec()));
        }
        Ok(NavCommand::ALL[ones[0]])
    }

    pub fn from_turn(t: Turn) -> NavCommand {
        match t {
            Turn::Left => NavCommand::Left,
            Turn::Right => NavCommand::Right,
            Turn::Straight => NavCommand::Straight,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NavCommand::Follow => "FOLLOW",
            NavCommand::Left => "LEFT",
            NavCommand::Right => "RIGHT",
            NavCommand::Straight => "STRAIGHT",
        }
    }
}

/// Command plus whether it is a correction after a route deviation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandState {
    pub command: NavCommand,
    pub corrected: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_roundtrip_and_rejection() {
        for c in NavCommand::ALL {
            let v = c.one_hot();
            assert_eq!(v.iter().sum::<f64>(), 1.0);
            assert_eq!(NavCommand::from_one_hot(&v), Ok(c));
        }
        assert!(NavCommand::from_one_hot(&[1.0, 1.0, 0.0, 0.0]).is_err());
        assert!(NavCommand::from_one_hot(&[0.5, 0.5, 0.0, 0.0]).is_err());
        assert!(NavCommand::from_one_hot(&[1.0, 0.0, 0.0]).is_err());
    }
}
