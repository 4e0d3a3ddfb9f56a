use std::fmt;

/// Number of sleep stages in the label set.
pub const NUM_STAGES: usize = 4;

/// Sleep stage label; N1 and N2 are merged into `Light`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SleepStage {
    Wake = 0,
    Rem = 1,
    Light = 2,
    Deep = 3,
}

impl SleepStage {
    pub const ALL: [SleepStage; NUM_STAGES] = [Self::Wake, Self::Rem, Self::Light, Self::Deep];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Single-letter file token: `W`, `R`, `L` or `D`.
    pub fn token(self) -> &'static str {
        match self {
            Self::Wake => "W",
            Self::Rem => "R",
            Self::Light => "L",
            Self::Deep => "D",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s.trim() {
            "W" => Some(Self::Wake),
            "R" => Some(Self::Rem),
            "L" => Some(Self::Light),
            "D" => Some(Self::Deep),
            _ => None,
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip() {
        for s in SleepStage::ALL {
            assert_eq!(SleepStage::from_token(s.token()), Some(s));
            assert_eq!(SleepStage::from_index(s.index()), Some(s));
        }
        assert_eq!(SleepStage::from_token("N3"), None);
        assert_eq!(SleepStage::from_index(4), None);
    }
}
