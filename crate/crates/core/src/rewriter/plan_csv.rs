use super::{plan_injection, InjectionMode, InjectionPlan, PadRegion, RewriteError};

pub const PLAN_HEADER: [&str; 5] = ["binary", "address", "length", "mode", "payload_hex"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRow {
    pub binary: String,
    pub address: u64,
    pub length: u64,
    pub mode: InjectionMode,
    pub payload: Vec<u8>,
}

impl PlanRow {
    pub fn from_plan(binary: &str, plan: &InjectionPlan) -> Self {
        PlanRow {
            binary: binary.to_string(),
            address: plan.pad.address,
            length: plan.pad.length,
            mode: plan.mode,
            payload: plan.payload.clone(),
        }
    }

    /// Re-plan against freshly scanned pads. The row must name one of them exactly.
    pub fn resolve(&self, pads: &[PadRegion]) -> Result<InjectionPlan, RewriteError> {
        let pad = pads
            .iter()
            .find(|p| p.address == self.address && p.length == self.length)
            .ok_or(RewriteError::PadMismatch {
                address: self.address,
            })?;
        plan_injection(pad, &self.payload, self.mode)
    }
}

pub fn plan_csv(rows: &[PlanRow], comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(&format!("# {c}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PLAN_HEADER).unwrap();
    for r in rows {
        w.write_record([
            r.binary.clone(),
            format!("{:#x}", r.address),
            r.length.to_string(),
            r.mode.to_string(),
            hex::encode(&r.payload),
        ])
        .unwrap();
    }
    out.push_str(std::str::from_utf8(&w.into_inner().unwrap()).unwrap());
    out
}

pub fn parse_plan_csv(text: &str) -> Result<Vec<PlanRow>, RewriteError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header_ok = reader
        .headers()
        .map(|h| h.iter().eq(PLAN_HEADER))
        .unwrap_or(false);
    if !header_ok {
        return Err(RewriteError::PlanParse {
            line: 1,
            message: format!("header must be `{}`", PLAN_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| RewriteError::PlanParse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| RewriteError::PlanParse { line, message };
        let address = record[1]
            .strip_prefix("0x")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .ok_or_else(|| bad(format!("bad address {:?}", &record[1])))?;
        rows.push(PlanRow {
            binary: record[0].to_string(),
            address,
            length: record[2].parse().map_err(|_| bad(format!("bad length {:?}", &record[2])))?,
            mode: record[3].parse().map_err(bad)?,
            payload: hex::decode(&record[4]).map_err(|e| bad(e.to_string()))?,
        });
    }
    Ok(rows)
}
