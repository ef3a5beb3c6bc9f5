//! Wire messages. The same JSON objects travel one per line over a plain
//! socket and one per text frame over WebSocket.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::session::{CacheStats, ChunkTimings, EventKind, SessionChunkRecord, SessionConfig, StateChange};
use super::state::{AudioStream, SessionState};
use crate::error::{LpmError, Result};
use crate::pipeline::Metrics;

/// Control-only events accepted in an `event` message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    UserSpeechStart,
    UserSpeechEnd,
    AgentSpeechStart,
    AgentSpeechEnd,
    Interrupt,
}

impl From<ControlKind> for EventKind {
    fn from(k: ControlKind) -> Self {
        match k {
            ControlKind::UserSpeechStart => EventKind::UserSpeechStart,
            ControlKind::UserSpeechEnd => EventKind::UserSpeechEnd,
            ControlKind::AgentSpeechStart => EventKind::AgentSpeechStart,
            ControlKind::AgentSpeechEnd => EventKind::AgentSpeechEnd,
            ControlKind::Interrupt => EventKind::Interrupt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ClientMsg {
    Start {
        #[serde(default)]
        config: SessionConfig,
        /// Stop after this many chunks; unbounded when absent.
        #[serde(default)]
        max_chunks: Option<usize>,
    },
    Audio {
        stream: AudioStream,
        k: usize,
        /// Little-endian f32 samples.
        samples_b64: String,
    },
    Text {
        prompt: String,
    },
    Event {
        kind: ControlKind,
    },
    PlayAck {
        chunk: usize,
    },
    End,
}

impl ClientMsg {
    pub fn audio(stream: AudioStream, k: usize, samples: &[f32]) -> Self {
        ClientMsg::Audio {
            stream,
            k,
            samples_b64: encode_samples(samples),
        }
    }

    /// Session event carried by this message; `Start` carries none.
    pub fn to_event(&self) -> Result<Option<EventKind>> {
        Ok(Some(match self {
            ClientMsg::Start { .. } => return Ok(None),
            ClientMsg::Audio { stream, k, samples_b64 } => EventKind::Audio {
                stream: *stream,
                k: *k,
                samples: decode_samples(samples_b64)?,
            },
            ClientMsg::Text { prompt } => EventKind::Text { prompt: prompt.clone() },
            ClientMsg::Event { kind } => (*kind).into(),
            ClientMsg::PlayAck { chunk } => EventKind::PlayAck { chunk: *chunk },
            ClientMsg::End => EventKind::End,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkMsg {
    pub index: usize,
    pub state: SessionState,
    pub discarded: bool,
    pub timings: ChunkTimings,
    pub cache: CacheStats,
    pub latent_hash: String,
    pub cond_hash: String,
    pub play_head: usize,
}

impl From<&SessionChunkRecord> for ChunkMsg {
    fn from(r: &SessionChunkRecord) -> Self {
        Self {
            index: r.index,
            state: r.state,
            discarded: r.discarded,
            timings: r.timings,
            cache: r.cache.clone(),
            latent_hash: r.latent_hash.clone(),
            cond_hash: r.stamp.cond_hash.clone(),
            play_head: r.play_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Chunk(ChunkMsg),
    State {
        from: SessionState,
        to: SessionState,
        boundary: usize,
    },
    Metrics(Metrics),
    Error {
        message: String,
    },
}

impl From<&StateChange> for ServerMsg {
    fn from(c: &StateChange) -> Self {
        ServerMsg::State {
            from: c.from,
            to: c.to,
            boundary: c.boundary,
        }
    }
}

impl ServerMsg {
    pub fn error(e: impl std::fmt::Display) -> Self {
        ServerMsg::Error { message: e.to_string() }
    }
}

pub fn encode_samples(samples: &[f32]) -> String {
    let bytes: Vec<u8> = samples.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_samples(b64: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| LpmError::Protocol(format!("bad base64 audio: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(LpmError::Protocol(format!("audio payload of {} bytes is not f32-aligned", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn parse_client(line: &str) -> Result<ClientMsg> {
    serde_json::from_str(line).map_err(|e| LpmError::Protocol(format!("bad client message: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip() {
        let s = [0.0f32, -1.5, 3.25, f32::MIN_POSITIVE];
        assert_eq!(decode_samples(&encode_samples(&s)).unwrap(), s);
        assert!(decode_samples("AAA=").is_err());
        assert!(decode_samples("!!").is_err());
    }

    #[test]
    fn client_messages_parse() {
        let m = parse_client(r#"{"type":"event","kind":"interrupt"}"#).unwrap();
        assert_eq!(m.to_event().unwrap(), Some(EventKind::Interrupt));
        let m = parse_client(r#"{"type":"start","config":{"seed":4}}"#).unwrap();
        match m {
            ClientMsg::Start { config, max_chunks } => {
                assert_eq!(config.seed, 4);
                assert_eq!(config.lookahead, 2);
                assert_eq!(max_chunks, None);
            }
            _ => panic!("expected start"),
        }
        assert_eq!(parse_client(r#"{"type":"play_ack","chunk":3}"#).unwrap(), ClientMsg::PlayAck { chunk: 3 });
        assert!(parse_client(r#"{"type":"event","kind":"end"}"#).is_err());
        assert!(parse_client("not json").is_err());
        let a = ClientMsg::audio(AudioStream::Listen, 2, &[1.0; 4]);
        let back = parse_client(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(
            back.to_event().unwrap(),
            Some(EventKind::Audio {
                stream: AudioStream::Listen,
                k: 2,
                samples: vec![1.0; 4]
            })
        );
    }

    #[test]
    fn server_messages_are_tagged() {
        let v = serde_json::to_value(ServerMsg::State {
            from: SessionState::Idle,
            to: SessionState::Listening,
            boundary: 4,
        })
        .unwrap();
        assert_eq!(v["type"], "state");
        assert_eq!(v["to"], "listening");
        assert_eq!(serde_json::to_value(ServerMsg::error("x")).unwrap()["type"], "error");
    }
}
