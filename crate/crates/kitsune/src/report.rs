//! CSV renderings of the report types. JSON goes straight through serde.

use kitsune_core::metrics::{ExperimentReport, SweepReport, TrafficRow, UtilizationQuadrants};
use kitsune_core::sim::Mode;
use serde::Serialize;

#[derive(Serialize)]
struct SpeedupRecord<'a> {
    graph: &'a str,
    mode: Mode,
    runtime_s: Option<f64>,
    dram_bytes: Option<u64>,
    l2_bytes: Option<u64>,
    speedup: f64,
    traffic_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadrantRow {
    pub graph: String,
    pub mode: Mode,
    #[serde(flatten)]
    pub quadrants: UtilizationQuadrants,
}

fn csv_of<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// Per-graph rows followed by one `geomean` row per mode.
pub fn speedup_csv(r: &ExperimentReport) -> String {
    let rows = r.rows.iter().map(|x| SpeedupRecord {
        graph: &x.graph,
        mode: x.mode,
        runtime_s: Some(x.runtime_s),
        dram_bytes: Some(x.dram_bytes),
        l2_bytes: Some(x.l2_bytes),
        speedup: x.speedup,
        traffic_reduction: Some(x.traffic_reduction),
    });
    let geo = r.geomean.iter().map(|g| SpeedupRecord {
        graph: "geomean",
        mode: g.mode,
        runtime_s: None,
        dram_bytes: None,
        l2_bytes: None,
        speedup: g.speedup,
        traffic_reduction: None,
    });
    csv_of(rows.chain(geo))
}

pub fn traffic_csv(rows: &[TrafficRow]) -> String {
    csv_of(rows)
}

pub fn quadrant_csv(rows: &[QuadrantRow]) -> String {
    // flatten is not supported by the csv serializer
    #[derive(Serialize)]
    struct Flat<'a> {
        graph: &'a str,
        mode: Mode,
        both_low: f64,
        low_sm: f64,
        low_dram: f64,
        neither_low: f64,
        threshold: f64,
    }
    csv_of(rows.iter().map(|r| Flat {
        graph: &r.graph,
        mode: r.mode,
        both_low: r.quadrants.both_low,
        low_sm: r.quadrants.low_sm,
        low_dram: r.quadrants.low_dram,
        neither_low: r.quadrants.neither_low,
        threshold: r.quadrants.threshold,
    }))
}

pub fn sweep_csv(r: &SweepReport) -> String {
    csv_of(&r.rows)
}
