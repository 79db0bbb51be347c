use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    RedLightViolation,
    CollisionVehicle,
    CollisionPedestrian,
    CollisionLayout,
    CollisionOther,
    RouteDeviation,
    OffLane,
    AgentBlocked,
    RouteComplete,
    Timeout,
}

impl EventKind {
    pub const ALL: [EventKind; 10] = [
        EventKind::RedLightViolation,
        EventKind::CollisionVehicle,
        EventKind::CollisionPedestrian,
        EventKind::CollisionLayout,
        EventKind::CollisionOther,
        EventKind::RouteDeviation,
        EventKind::OffLane,
        EventKind::AgentBlocked,
        EventKind::RouteComplete,
        EventKind::Timeout,
    ];

    /// Everything except completion and the timeout marker counts as an infraction.
    pub fn is_infraction(self) -> bool {
        !matches!(self, EventKind::RouteComplete | EventKind::Timeout)
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::RedLightViolation => "RED_LIGHT_VIOLATION",
            EventKind::CollisionVehicle => "COLLISION_VEHICLE",
            EventKind::CollisionPedestrian => "COLLISION_PEDESTRIAN",
            EventKind::CollisionLayout => "COLLISION_LAYOUT",
            EventKind::CollisionOther => "COLLISION_OTHER",
            EventKind::RouteDeviation => "ROUTE_DEVIATION",
            EventKind::OffLane => "OFF_LANE",
            EventKind::AgentBlocked => "AGENT_BLOCKED",
            EventKind::RouteComplete => "ROUTE_COMPLETE",
            EventKind::Timeout => "TIMEOUT",
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        EventKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingEvent {
    pub tick: u64,
    pub kind: EventKind,
    #[serde(default)]
    pub payload: serde_json::Value,
}

/// Writes events as one JSON object per line.
pub fn write_event_log<W: Write>(mut w: W, events: &[DrivingEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_event_log<R: BufRead>(r: R) -> Result<Vec<DrivingEvent>, serde_json::Error> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_roundtrip_uses_screaming_case() {
        let evs = vec![
            DrivingEvent { tick: 3, kind: EventKind::RedLightViolation, payload: serde_json::json!({"lane": 4}) },
            DrivingEvent { tick: 9, kind: EventKind::RouteComplete, payload: serde_json::Value::Null },
        ];
        let mut buf = Vec::new();
        write_event_log(&mut buf, &evs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"RED_LIGHT_VIOLATION\""));
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_event_log(&buf[..]).unwrap(), evs);
        for k in EventKind::ALL {
            assert_eq!(EventKind::parse(k.name()), Some(k));
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
    }
}
