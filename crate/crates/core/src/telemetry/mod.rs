//! Ingestion path from plug messages to a queryable time-series store.
//!
//! Plugs publish Tasmota-style `tele/<device>/SENSOR` JSON payloads. The service
//! parses each message into a [`Measurement`], tags it with registry metadata
//! and appends it to an append-only line log.

pub mod service;
pub mod store;
pub mod wire;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plugsim::Measurement;

pub use service::{serve, IngestStats, Publisher, ServiceConfig, ServiceHandle};
pub use store::{AppendOutcome, Durability, StoreError, TagFilter, TimeSeriesStore};
pub use wire::WireMessage;

pub const SERIES_VOLTAGE: &str = "voltage";
pub const UNKNOWN_TAG: &str = "unknown";

#[derive(Debug, Error, PartialEq)]
pub enum MessageError {
    #[error("malformed topic `{0}` (expected tele/<device_id>/SENSOR)")]
    Topic(String),
    #[error("payload is not valid JSON: {0}")]
    Json(String),
    #[error("payload has no numeric ENERGY.Voltage")]
    MissingVoltage,
    #[error("unparseable Time `{0}`")]
    Time(String),
}

impl MessageError {
    pub fn kind(&self) -> &'static str {
        match self {
            MessageError::Topic(_) => "topic",
            MessageError::Json(_) => "json",
            MessageError::MissingVoltage => "missing_voltage",
            MessageError::Time(_) => "time",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SensorPayload {
    #[serde(rename = "Time", default, skip_serializing_if = "Option::is_none")]
    time: Option<String>,
    #[serde(rename = "ENERGY")]
    energy: Option<EnergyReading>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase")]
struct EnergyReading {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    voltage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    power: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    current: Option<f64>,
}

/// Parses an ISO-8601 timestamp. Values without an offset are taken as UTC.
pub fn parse_time(s: &str) -> Result<i64, MessageError> {
    let err = || MessageError::Time(s.to_string());
    let dt = match DateTime::parse_from_rfc3339(s) {
        Ok(dt) => dt.naive_utc(),
        Err(_) => NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").map_err(|_| err())?,
    };
    dt.and_utc().timestamp_nanos_opt().ok_or_else(err)
}

/// Formats nanoseconds as `YYYY-MM-DDTHH:MM:SS[.fff]` in UTC.
pub fn format_time(timestamp_ns: i64) -> String {
    DateTime::from_timestamp_nanos(timestamp_ns)
        .naive_utc()
        .format("%Y-%m-%dT%H:%M:%S%.f")
        .to_string()
}

pub fn sensor_topic(device_id: &str) -> String {
    format!("tele/{device_id}/SENSOR")
}

fn device_from_topic(topic: &str) -> Result<&str, MessageError> {
    let mut parts = topic.split('/');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some("tele"), Some(dev), Some("SENSOR"), None) if !dev.is_empty() => Ok(dev),
        _ => Err(MessageError::Topic(topic.to_string())),
    }
}

pub fn parse_sensor_message(msg: &WireMessage) -> Result<Measurement, MessageError> {
    let device = device_from_topic(&msg.topic)?;
    let payload: SensorPayload =
        serde_json::from_slice(&msg.payload).map_err(|e| MessageError::Json(e.to_string()))?;
    let energy = payload.energy.unwrap_or_default();
    let voltage_v = energy.voltage.ok_or(MessageError::MissingVoltage)?;
    let time = payload
        .time
        .ok_or_else(|| MessageError::Time(String::new()))?;
    Ok(Measurement {
        device_id: device.to_string(),
        timestamp_ns: parse_time(&time)?,
        voltage_v,
        power_w: energy.power,
        current_a: energy.current,
    })
}

pub fn encode_sensor_message(m: &Measurement) -> WireMessage {
    let payload = SensorPayload {
        time: Some(format_time(m.timestamp_ns)),
        energy: Some(EnergyReading {
            voltage: Some(m.voltage_v),
            power: m.power_w,
            current: m.current_a,
        }),
    };
    WireMessage {
        topic: sensor_topic(&m.device_id),
        payload: serde_json::to_vec(&payload).expect("payload serializes"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    L1,
    L2,
    L3,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::L1 => "L1",
            Phase::L2 => "L2",
            Phase::L3 => "L3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub phase: Phase,
    pub location: String,
    pub vendor: String,
    pub bus: String,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Device metadata, stored as TOML:
///
/// ```toml
/// [devices.plug741]
/// phase = "L1"
/// location = "house-741"
/// vendor = "Nous A1T"
/// bus = "741"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceRegistry {
    #[serde(default)]
    pub devices: BTreeMap<String, DeviceInfo>,
}

impl DeviceRegistry {
    pub fn get(&self, device_id: &str) -> Option<&DeviceInfo> {
        self.devices.get(device_id)
    }

    pub fn insert(&mut self, device_id: impl Into<String>, info: DeviceInfo) {
        self.devices.insert(device_id.into(), info);
    }

    pub fn from_toml_str(s: &str) -> Result<Self, RegistryError> {
        toml::from_str(s).map_err(|e| RegistryError::Parse {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("registry serializes")
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| RegistryError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Registry entries for every device placed in a scenario.
    pub fn from_scenario(cfg: &crate::plugsim::ScenarioConfig) -> Self {
        let mut reg = Self::default();
        let mut add = |id: &str,
                       bus: &str,
                       phase: &Option<String>,
                       location: &Option<String>,
                       vendor: &Option<String>| {
            let phase = match phase.as_deref() {
                Some("L2") => Phase::L2,
                Some("L3") => Phase::L3,
                _ => Phase::L1,
            };
            reg.insert(
                id,
                DeviceInfo {
                    phase,
                    location: location.clone().unwrap_or_else(|| format!("bus-{bus}")),
                    vendor: vendor.clone().unwrap_or_else(|| UNKNOWN_TAG.into()),
                    bus: bus.to_string(),
                },
            );
        };
        for p in &cfg.plugs {
            add(&p.profile.device_id, &p.bus, &p.phase, &p.location, &p.vendor);
        }
        for r in &cfg.references {
            add(&r.profile.device_id, &r.bus, &r.phase, &r.location, &r.vendor);
        }
        reg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tags {
    pub device: String,
    pub phase: String,
    pub location: String,
    pub vendor: String,
}

/// A measurement as persisted in the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPoint {
    pub series: String,
    pub tags: Tags,
    pub value: f64,
    pub timestamp_ns: i64,
}

/// A tagged point, plus whether the device was missing from the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub point: TimeSeriesPoint,
    pub unregistered: bool,
}

pub fn augment(m: &Measurement, reg: &DeviceRegistry) -> Augmented {
    let (tags, unregistered) = match reg.get(&m.device_id) {
        Some(info) => (
            Tags {
                device: m.device_id.clone(),
                phase: info.phase.to_string(),
                location: info.location.clone(),
                vendor: info.vendor.clone(),
            },
            false,
        ),
        None => {
            log::warn!("device `{}` is not in the registry", m.device_id);
            (
                Tags {
                    device: m.device_id.clone(),
                    phase: UNKNOWN_TAG.into(),
                    location: UNKNOWN_TAG.into(),
                    vendor: UNKNOWN_TAG.into(),
                },
                true,
            )
        }
    };
    Augmented {
        point: TimeSeriesPoint {
            series: SERIES_VOLTAGE.into(),
            tags,
            value: m.voltage_v,
            timestamp_ns: m.timestamp_ns,
        },
        unregistered,
    }
}
