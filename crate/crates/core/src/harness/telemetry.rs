//! Per-request and per-action records, and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::profiles::ModelId;
use crate::protocol::{ActionId, ActionKind, ActionStatus, GpuId, RequestId, ResponseStatus, WorkerId};
use crate::time::{Nanos, TimePoint};

pub const REQUEST_HEADER: &str = "request_id,model_id,arrival_ns,deadline_ns,status,latency_ns,batch_size,cold_start";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: RequestId,
    pub model_id: ModelId,
    #[serde(rename = "arrival_ns")]
    pub arrival: TimePoint,
    #[serde(rename = "deadline_ns")]
    pub deadline: TimePoint,
    pub status: ResponseStatus,
    /// Zero for requests denied at admission.
    #[serde(rename = "latency_ns")]
    pub latency: Nanos,
    /// Size of the serving batch; 0 when denied.
    pub batch_size: u32,
    #[serde(with = "flag")]
    pub cold_start: bool,
    /// Not part of the CSV schema.
    #[serde(skip)]
    pub slo: Nanos,
}

impl RequestRecord {
    pub fn violates_slo(&self) -> bool {
        self.status == ResponseStatus::Ok && self.latency > self.slo
    }
}

mod flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        Ok(u8::deserialize(d)? != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub action_id: ActionId,
    pub worker: WorkerId,
    pub gpu: GpuId,
    pub kind: ActionKind,
    pub model_id: ModelId,
    pub batch_size: u32,
    pub status: ActionStatus,
    #[serde(rename = "dispatched_ns")]
    pub dispatched: TimePoint,
    #[serde(rename = "predicted_duration_ns")]
    pub predicted_duration: Nanos,
    #[serde(rename = "device_duration_ns")]
    pub device_duration: Nanos,
    #[serde(rename = "predicted_start_ns")]
    pub predicted_start: TimePoint,
    #[serde(rename = "predicted_end_ns")]
    pub predicted_end: TimePoint,
    #[serde(rename = "actual_start_ns")]
    pub actual_start: TimePoint,
    /// End of the device work (Exec for Infer, copy for Load).
    #[serde(rename = "actual_end_ns")]
    pub actual_end: TimePoint,
}

impl ActionRecord {
    /// Measured minus predicted duration; positive is an underprediction.
    pub fn prediction_error(&self) -> Option<Nanos> {
        (self.status == ActionStatus::Success).then(|| self.device_duration - self.predicted_duration)
    }

    /// Actual minus predicted end time.
    pub fn completion_error(&self) -> Option<Nanos> {
        (self.status == ActionStatus::Success).then(|| self.actual_end - self.predicted_end)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_requests(path: &Path, rows: &[RequestRecord]) -> Result<(), csv::Error> {
    let header: Vec<&str> = REQUEST_HEADER.split(',').collect();
    write_csv(path, rows, &header)
}

pub const ACTION_HEADER: &str = "action_id,worker,gpu,kind,model_id,batch_size,status,dispatched_ns,predicted_duration_ns,device_duration_ns,predicted_start_ns,predicted_end_ns,actual_start_ns,actual_end_ns";

pub fn write_actions(path: &Path, rows: &[ActionRecord]) -> Result<(), csv::Error> {
    let header: Vec<&str> = ACTION_HEADER.split(',').collect();
    write_csv(path, rows, &header)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("requests.csv");
        write_requests(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim_end(), REQUEST_HEADER);
        assert!(read_csv::<RequestRecord>(&path).unwrap().is_empty());

        let rec = RequestRecord {
            request_id: 4,
            model_id: 2,
            arrival: TimePoint(10),
            deadline: TimePoint(99),
            status: ResponseStatus::Ok,
            latency: Nanos(50),
            batch_size: 8,
            cold_start: true,
            slo: Nanos::ZERO,
        };
        write_requests(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1), Some("4,2,10,99,ok,50,8,1"));
        assert_eq!(read_csv::<RequestRecord>(&path).unwrap(), vec![rec]);
    }
}
