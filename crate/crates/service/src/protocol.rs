//! Websocket message types and the per-connection message handler.
//!
//! Every client message carries a `seq`; seqs must strictly increase over
//! a connection. Each accepted message is answered by exactly one `ack` or
//! `carve_result` with the same seq (a `report` request additionally gets
//! the `report` message first). Alarm messages are emitted only when the
//! alarm level changes. An optional `role` field on client messages is
//! accepted and ignored.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use spinesim::sim::{
    AlarmLevel, AlarmState, CarveCommand, ChunkMesh, DecompressionReport, SimSession, Tool, VisibilityConfig,
};
use spinesim::{Point3, StructureId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    ToolSelect {
        seq: u64,
        tool: Tool,
    },
    /// Continuous pose stream; an active burr carves at every pose.
    ToolPose {
        seq: u64,
        tip: Point3,
        direction: Point3,
        #[serde(default)]
        active: bool,
    },
    /// One discrete bite with the selected tool, or with `tool` when given
    /// (which also becomes the selected tool).
    Carve {
        seq: u64,
        tip: Point3,
        direction: Point3,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tool: Option<Tool>,
    },
    Undo {
        seq: u64,
    },
    Visibility {
        seq: u64,
        structure: String,
        visible: bool,
    },
    Isolate {
        seq: u64,
        on: bool,
    },
    Exposure {
        seq: u64,
        levels: Vec<String>,
    },
    Report {
        seq: u64,
    },
}

impl ClientMessage {
    pub fn seq(&self) -> u64 {
        match *self {
            ClientMessage::ToolSelect { seq, .. }
            | ClientMessage::ToolPose { seq, .. }
            | ClientMessage::Carve { seq, .. }
            | ClientMessage::Undo { seq }
            | ClientMessage::Visibility { seq, .. }
            | ClientMessage::Isolate { seq, .. }
            | ClientMessage::Exposure { seq, .. }
            | ClientMessage::Report { seq } => seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructurePatch {
    pub label: u16,
    pub structure: String,
    pub vertex_count: usize,
    /// Little-endian f32 xyz triples, base64.
    pub positions: String,
    /// Little-endian u32 triangle indices, base64.
    pub indices: String,
}

/// Full replacement mesh for one chunk; an empty `structures` list clears
/// the chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkPatch {
    pub chunk: [usize; 3],
    pub structures: Vec<StructurePatch>,
}

impl ChunkPatch {
    pub fn encode(mesh: &ChunkMesh) -> Self {
        ChunkPatch {
            chunk: mesh.chunk,
            structures: mesh
                .structures
                .iter()
                .map(|s| StructurePatch {
                    label: s.label,
                    structure: StructureId::from_label(s.label)
                        .map(|id| id.to_string())
                        .unwrap_or_else(|_| s.label.to_string()),
                    vertex_count: s.positions.len(),
                    positions: B64.encode(bytes_of(s.positions.iter().flatten().map(|v| v.to_le_bytes()))),
                    indices: B64.encode(bytes_of(s.indices.iter().map(|v| v.to_le_bytes()))),
                })
                .collect(),
        }
    }

    /// Decodes `(positions, indices)` of one structure.
    pub fn decode(p: &StructurePatch) -> Result<(Vec<[f32; 3]>, Vec<u32>), String> {
        let pos = B64.decode(&p.positions).map_err(|e| e.to_string())?;
        let idx = B64.decode(&p.indices).map_err(|e| e.to_string())?;
        if pos.len() % 12 != 0 || idx.len() % 12 != 0 {
            return Err("truncated geometry payload".into());
        }
        let positions = pos
            .chunks_exact(12)
            .map(|c| std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
            .collect();
        let indices = idx.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((positions, indices))
    }
}

fn bytes_of<const N: usize>(it: impl Iterator<Item = [u8; N]>) -> Vec<u8> {
    it.flatten().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Ack {
        seq: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        visibility: Option<VisibilityConfig>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        chunks: Option<Vec<ChunkPatch>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alarm: Option<AlarmState>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        notice: Option<String>,
    },
    CarveResult {
        seq: u64,
        applied: bool,
        removed: BTreeMap<String, u64>,
        removed_total: u64,
        violation: bool,
        chunks: Vec<ChunkPatch>,
        alarm: AlarmState,
    },
    Alarm {
        level: AlarmLevel,
        distance_mm: Option<f64>,
        structure: Option<String>,
    },
    Report {
        seq: u64,
        report: DecompressionReport,
        grid_checksum: String,
        scene_checksum: String,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
        message: String,
    },
}

fn ack(seq: u64) -> ServerMessage {
    ServerMessage::Ack {
        seq,
        visibility: None,
        chunks: None,
        alarm: None,
        notice: None,
    }
}

/// Serialized message handling for one connection.
pub struct SessionHandler {
    session: SimSession,
    last_seq: Option<u64>,
}

impl SessionHandler {
    pub fn new(session: SimSession) -> Self {
        SessionHandler { session, last_seq: None }
    }

    pub fn session(&self) -> &SimSession {
        &self.session
    }

    /// Handles one text frame; malformed input yields an `error` message.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => {
                let seq = serde_json::from_str::<serde_json::Value>(text)
                    .ok()
                    .and_then(|v| v.get("seq").and_then(|s| s.as_u64()));
                vec![ServerMessage::Error {
                    seq,
                    message: format!("malformed message: {e}"),
                }]
            }
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        let seq = msg.seq();
        if let Some(last) = self.last_seq {
            if seq <= last {
                return vec![ServerMessage::Error {
                    seq: Some(seq),
                    message: format!("seq {seq} is not after {last}"),
                }];
            }
        }
        self.last_seq = Some(seq);
        match self.dispatch(msg) {
            Ok(out) => out,
            Err(e) => vec![ServerMessage::Error {
                seq: Some(seq),
                message: e.to_string(),
            }],
        }
    }

    fn alarm_change(&mut self, state: &AlarmState, out: &mut Vec<ServerMessage>) {
        if self.session.note_alarm(state) {
            out.push(ServerMessage::Alarm {
                level: state.level,
                distance_mm: state.distance_mm,
                structure: state.structure.clone(),
            });
        }
    }

    fn carve(&mut self, cmd: CarveCommand) -> spinesim::Result<Vec<ServerMessage>> {
        let r = self.session.apply_carve(&cmd)?;
        let removed_total = r.removed_total();
        let mut out = vec![ServerMessage::CarveResult {
            seq: r.seq,
            applied: r.applied,
            removed: r.removed,
            removed_total,
            violation: r.violation,
            chunks: r.dirty_chunks.iter().map(ChunkPatch::encode).collect(),
            alarm: r.alarm.clone(),
        }];
        self.alarm_change(&r.alarm, &mut out);
        Ok(out)
    }

    fn dispatch(&mut self, msg: ClientMessage) -> spinesim::Result<Vec<ServerMessage>> {
        Ok(match msg {
            ClientMessage::ToolSelect { seq, tool } => {
                self.session.select_tool(tool)?;
                vec![ack(seq)]
            }
            ClientMessage::ToolPose {
                seq,
                tip,
                direction,
                active,
            } => {
                let tool = self.session.tool();
                if active && tool.kind == spinesim::sim::ToolKind::Burr {
                    return self.carve(CarveCommand {
                        seq,
                        tool,
                        tip,
                        direction,
                        active,
                    });
                }
                let state = self.session.proximity(tip);
                let mut out = vec![ServerMessage::Ack {
                    seq,
                    visibility: None,
                    chunks: None,
                    alarm: Some(state.clone()),
                    notice: None,
                }];
                self.alarm_change(&state, &mut out);
                out
            }
            ClientMessage::Carve {
                seq,
                tip,
                direction,
                tool,
            } => {
                if let Some(t) = tool {
                    self.session.select_tool(t)?;
                }
                let tool = self.session.tool();
                self.carve(CarveCommand {
                    seq,
                    tool,
                    tip,
                    direction,
                    active: true,
                })?
            }
            ClientMessage::Undo { seq } => match self.session.undo() {
                Some(chunks) => vec![ServerMessage::Ack {
                    seq,
                    visibility: None,
                    chunks: Some(chunks.iter().map(ChunkPatch::encode).collect()),
                    alarm: None,
                    notice: None,
                }],
                None => vec![ServerMessage::Ack {
                    seq,
                    visibility: None,
                    chunks: None,
                    alarm: None,
                    notice: Some("nothing to undo".into()),
                }],
            },
            ClientMessage::Visibility {
                seq,
                structure,
                visible,
            } => {
                let v = self.session.set_visibility(&structure, visible)?.clone();
                vec![with_visibility(seq, v)]
            }
            ClientMessage::Isolate { seq, on } => {
                let v = self.session.isolate_spine(on).clone();
                vec![with_visibility(seq, v)]
            }
            ClientMessage::Exposure { seq, levels } => {
                let levels: Vec<StructureId> = levels.iter().map(|l| l.parse()).collect::<Result<_, _>>()?;
                let v = self.session.auto_exposure(&levels)?.clone();
                vec![with_visibility(seq, v)]
            }
            ClientMessage::Report { seq } => vec![
                ServerMessage::Report {
                    seq,
                    report: self.session.decompression_report(),
                    grid_checksum: self.session.grid_checksum(),
                    scene_checksum: self.session.scene_checksum(),
                },
                ack(seq),
            ],
        })
    }
}

fn with_visibility(seq: u64, v: VisibilityConfig) -> ServerMessage {
    ServerMessage::Ack {
        seq,
        visibility: Some(v),
        chunks: None,
        alarm: None,
        notice: None,
    }
}

/// Client messages that replay a carve script: a `carve` carrying its tool
/// for every command, inactive commands as plain poses.
pub fn script_messages(script: &[CarveCommand]) -> Vec<ClientMessage> {
    script
        .iter()
        .map(|c| {
            if c.active {
                ClientMessage::Carve {
                    seq: c.seq,
                    tip: c.tip,
                    direction: c.direction,
                    tool: Some(c.tool),
                }
            } else {
                ClientMessage::ToolPose {
                    seq: c.seq,
                    tip: c.tip,
                    direction: c.direction,
                    active: false,
                }
            }
        })
        .collect()
}
