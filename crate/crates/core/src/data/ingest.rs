use super::{AgentState, Demonstration, FrameSnapshot};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub demos: Vec<Demonstration>,
    /// Frames dropped because at least one agent was missing.
    pub dropped_frames: usize,
}

struct PendingDemo {
    id: String,
    agents: Vec<String>,
    agent_index: HashMap<String, usize>,
    frames: HashMap<i64, Vec<Option<AgentState>>>,
    frame_order: Vec<i64>,
}

/// Reads a `demo_id,frame,agent_id,x,y` CSV (header required).
pub fn ingest(path: &Path, sample_rate_hz: f64) -> Result<IngestReport> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, sample_rate_hz)
}

/// Groups rows into demonstrations. Demo order and agent order follow first
/// appearance; frames are sorted by frame number. A frame missing any of
/// its demo's agents is dropped and counted.
pub fn ingest_reader<R: Read>(input: R, sample_rate_hz: f64) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let expected = ["demo_id", "frame", "agent_id", "x", "y"];
    if !headers.is_empty() && headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}, got {:?}", expected.join(","), headers),
        });
    }

    let mut demos: Vec<PendingDemo> = Vec::new();
    let mut demo_index: HashMap<String, usize> = HashMap::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", record.len())));
        }
        let demo_id = record[0].to_string();
        let frame: i64 = record[1]
            .parse()
            .map_err(|e| parse_err(format!("frame `{}`: {e}", &record[1])))?;
        let agent = record[2].to_string();
        let x: f64 = record[3]
            .parse()
            .map_err(|e| parse_err(format!("x `{}`: {e}", &record[3])))?;
        let y: f64 = record[4]
            .parse()
            .map_err(|e| parse_err(format!("y `{}`: {e}", &record[4])))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err("non-finite coordinate".to_string()));
        }

        let di = *demo_index.entry(demo_id.clone()).or_insert_with(|| {
            demos.push(PendingDemo {
                id: demo_id.clone(),
                agents: Vec::new(),
                agent_index: HashMap::new(),
                frames: HashMap::new(),
                frame_order: Vec::new(),
            });
            demos.len() - 1
        });
        let demo = &mut demos[di];
        let ai = match demo.agent_index.get(&agent) {
            Some(&i) => i,
            None => {
                demo.agents.push(agent.clone());
                demo.agent_index.insert(agent.clone(), demo.agents.len() - 1);
                demo.agents.len() - 1
            }
        };
        let slots = demo.frames.entry(frame).or_insert_with(|| {
            demo.frame_order.push(frame);
            Vec::new()
        });
        if slots.len() <= ai {
            slots.resize(ai + 1, None);
        }
        if slots[ai].is_some() {
            return Err(Error::data(format!(
                "line {line}: duplicate row for demo {demo_id} frame {frame} agent {agent}"
            )));
        }
        slots[ai] = Some(AgentState::new(x, y));
    }

    let mut report = IngestReport::default();
    for mut demo in demos {
        let k = demo.agents.len();
        demo.frame_order.sort_unstable();
        let mut frames = Vec::with_capacity(demo.frame_order.len());
        for f in &demo.frame_order {
            let slots = &demo.frames[f];
            if slots.len() == k && slots.iter().all(Option::is_some) {
                frames.push(FrameSnapshot::new(slots.iter().map(|s| s.unwrap()).collect()));
            } else {
                report.dropped_frames += 1;
            }
        }
        report
            .demos
            .push(Demonstration::new(demo.id, frames, sample_rate_hz));
    }
    if report.dropped_frames > 0 {
        log::warn!(
            "dropped {} frame(s) with missing agents",
            report.dropped_frames
        );
    }
    Ok(report)
}

/// Writes demonstrations in the ingest schema. Agent ids are storage
/// indices and frame numbers are positions within each demo.
pub fn write_csv<W: Write>(out: W, demos: &[Demonstration]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["demo_id", "frame", "agent_id", "x", "y"])?;
    for demo in demos {
        for (t, frame) in demo.frames.iter().enumerate() {
            for (k, s) in frame.states.iter().enumerate() {
                writer.write_record([
                    demo.id.clone(),
                    t.to_string(),
                    k.to_string(),
                    s.x.to_string(),
                    s.y.to_string(),
                ])?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}
