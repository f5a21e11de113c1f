//! Process exit codes.

pub const EXIT_IO: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_PARSE,
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONTRACT,
            message: message.into(),
        }
    }
}

impl From<baselayer::Error> for Failure {
    fn from(err: baselayer::Error) -> Self {
        let code = match err.root() {
            baselayer::Error::Format(_) => EXIT_PARSE,
            baselayer::Error::Io(_) => EXIT_IO,
            baselayer::Error::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_CONTRACT,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Failure::io(err.to_string())
    }
}
