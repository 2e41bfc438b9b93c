use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("schema violation: {0}")]
    Schema(String),

    #[error("authentication failed")]
    Authentication,
    #[error("no key with id `{0}`")]
    KeyMismatch(String),
    #[error("nonce counter exhausted for key `{0}`")]
    NonceExhausted(String),
    #[error("payload of {0} bytes exceeds the 1 MiB limit")]
    PayloadTooLarge(usize),
    #[error("rule `{rule}` does not reference device `{device}`")]
    Binding { rule: String, device: String },
    #[error("unsupported envelope version {0}")]
    UnsupportedVersion(u32),

    #[error("attestation rejected: {0}")]
    AttestationRejected(String),

    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("mode change requested while {0} event(s) are in flight")]
    ModeChangeWhileBusy(usize),

    #[error("not connected to broker")]
    NotConnected,
    #[error("invalid topic `{0}`")]
    TopicInvalid(String),
    #[error("invalid subscription pattern `{0}`")]
    PatternInvalid(String),
    #[error("subscriber queue full")]
    Backpressure,
    #[error("broker unreachable at {addr}: {reason}")]
    BrokerUnreachable { addr: String, reason: String },
    #[error("frame error: {0}")]
    Frame(String),
    #[error("publish failed: {0}")]
    Publish(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),

    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("command for `{command_device}` applied to actuator `{actuator}`")]
    WrongDevice {
        command_device: String,
        actuator: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },

    #[error("tracing is not enabled on this boundary")]
    TracingDisabled,
    #[error("cannot build a distribution from an empty trace")]
    EmptyTrace,
    #[error("distributions have different alphabets ({0} vs {1} cells)")]
    AlphabetMismatch(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
