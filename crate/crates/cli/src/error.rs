use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Core(#[from] echo_imager::Error),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    category: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a str>,
    message: String,
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Core(e) if e.is_input_error() => "config",
            CliError::Core(_) => "numerical",
            CliError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "config" => 2,
            "numerical" => 3,
            _ => 1,
        }
    }

    /// One-line JSON record for stderr.
    pub fn to_json(&self) -> String {
        let path = match self {
            CliError::Config { path, .. } => Some(path.as_str()),
            _ => None,
        };
        let message = match self {
            CliError::Config { message, .. } => message.clone(),
            other => other.to_string(),
        };
        serde_json::to_string(&Report { category: self.category(), path, message }).expect("error serializes")
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
