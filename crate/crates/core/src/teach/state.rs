use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    GazeTracking,
    ObjectProposed,
    Naming,
    Recording,
    Done,
    Failed,
}

impl SessionState {
    pub const ALL: [SessionState; 7] = [
        SessionState::Idle,
        SessionState::GazeTracking,
        SessionState::ObjectProposed,
        SessionState::Naming,
        SessionState::Recording,
        SessionState::Done,
        SessionState::Failed,
    ];

    /// Whether `self -> to` is one of the declared transitions. Staying in
    /// the same state is not a transition.
    pub fn can_transition_to(self, to: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, to),
            (Idle, GazeTracking)
                | (GazeTracking, ObjectProposed)
                | (ObjectProposed, Naming)
                | (Naming, Recording)
                | (Recording, Done)
                | (ObjectProposed, GazeTracking)
                | (Done, GazeTracking)
        ) || (to == Failed && self != Failed)
    }

    /// States in which gaze updates feed segmentation.
    pub fn accepts_gaze(self) -> bool {
        matches!(self, SessionState::GazeTracking | SessionState::ObjectProposed | SessionState::Done)
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SessionState::Idle => "idle",
            SessionState::GazeTracking => "gaze_tracking",
            SessionState::ObjectProposed => "object_proposed",
            SessionState::Naming => "naming",
            SessionState::Recording => "recording",
            SessionState::Done => "done",
            SessionState::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::SessionState::*;
    use super::*;

    #[test]
    fn declared_edges() {
        let edges: Vec<_> =
            SessionState::ALL.iter().flat_map(|&a| SessionState::ALL.iter().map(move |&b| (a, b))).filter(|&(a, b)| a.can_transition_to(b)).collect();
        // seven explicit edges plus six into Failed
        assert_eq!(edges.len(), 13);
        assert!(!Failed.can_transition_to(GazeTracking));
        assert!(!Idle.can_transition_to(Idle));
        assert!(!Naming.can_transition_to(GazeTracking));
    }
}
