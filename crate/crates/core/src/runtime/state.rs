use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Warmup,
    Idle,
    Listening,
    Responding,
    Terminated,
}

impl SessionState {
    pub const ALL: [SessionState; 5] = [
        SessionState::Warmup,
        SessionState::Idle,
        SessionState::Listening,
        SessionState::Responding,
        SessionState::Terminated,
    ];

    /// (speak stream active, listen stream active).
    pub fn audio_activity(self) -> (bool, bool) {
        match self {
            SessionState::Responding => (true, true),
            SessionState::Listening => (false, true),
            _ => (false, false),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioStream {
    Speak,
    Listen,
}

/// State-machine triggers. Data-carrying events map onto `None` here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    UserSpeechStart,
    UserSpeechEnd,
    AgentSpeechStart,
    AgentSpeechEnd,
    Interrupt,
    End,
    /// Internal: caches hold the sink chunks.
    WarmupComplete,
}

impl Trigger {
    pub const ALL: [Trigger; 7] = [
        Trigger::UserSpeechStart,
        Trigger::UserSpeechEnd,
        Trigger::AgentSpeechStart,
        Trigger::AgentSpeechEnd,
        Trigger::Interrupt,
        Trigger::End,
        Trigger::WarmupComplete,
    ];
}

/// Transition table. Pairs not listed are no-ops.
pub fn transition(state: SessionState, trigger: Trigger) -> SessionState {
    use SessionState::*;
    use Trigger::*;
    match (state, trigger) {
        (Terminated, _) => Terminated,
        (_, End) => Terminated,
        (Warmup, WarmupComplete) => Idle,
        (Idle, UserSpeechStart) => Listening,
        (Listening, AgentSpeechStart) => Responding,
        (Responding, Interrupt) | (Responding, UserSpeechStart) => Listening,
        (Responding, AgentSpeechEnd) => Idle,
        (Listening, UserSpeechEnd) => Idle,
        (s, _) => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SessionState::*;
    use Trigger::*;

    #[test]
    fn table_examples() {
        assert_eq!(transition(Idle, UserSpeechStart), Listening);
        assert_eq!(transition(Responding, Interrupt), Listening);
        assert_eq!(transition(Responding, UserSpeechStart), Listening);
        assert_eq!(transition(Responding, AgentSpeechEnd), Idle);
        assert_eq!(transition(Listening, UserSpeechEnd), Idle);
        assert_eq!(transition(Listening, AgentSpeechStart), Responding);
        assert_eq!(transition(Warmup, WarmupComplete), Idle);
        assert_eq!(transition(Warmup, UserSpeechStart), Warmup);
    }

    #[test]
    fn closure_over_every_pair() {
        let mut changes = 0;
        for s in SessionState::ALL {
            for t in Trigger::ALL {
                let next = transition(s, t);
                if t == End {
                    assert_eq!(next, Terminated);
                }
                if s == Terminated {
                    assert_eq!(next, Terminated);
                }
                if next != s {
                    changes += 1;
                }
            }
        }
        // 4 live states reach Terminated on End, plus 7 table rows
        assert_eq!(changes, 11);
    }

    #[test]
    fn mute_flags_by_state() {
        assert_eq!(Responding.audio_activity(), (true, true));
        assert_eq!(Listening.audio_activity(), (false, true));
        assert_eq!(Idle.audio_activity(), (false, false));
        assert_eq!(Warmup.audio_activity(), (false, false));
    }
}
