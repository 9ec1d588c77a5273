//! XML data-access protocol: a flat, OPC XML-DA shaped vocabulary with the
//! operations GetStatus, Browse, Read, Write, Subscribe,
//! SubscriptionPolledRefresh and SubscriptionCancel.
//!
//! Encoding is canonical: no whitespace between elements, attributes sorted
//! by name, numbers in shortest round-trip form. The normative examples
//! live in `docs/protocol.md`.

mod codec;
mod server;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::device::{BrowseEntry, ItemValue, WriteRequest, WriteResult};

pub use codec::{
    DecodeError, decode_request, decode_response, encode_request, encode_response,
};
pub use server::{DEFAULT_TTL, DaServer, Subscription, SubscriptionItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operation {
    GetStatus,
    Browse,
    Read,
    Write,
    Subscribe,
    SubscriptionPolledRefresh,
    SubscriptionCancel,
}

impl Operation {
    pub const ALL: [Operation; 7] = [
        Operation::GetStatus,
        Operation::Browse,
        Operation::Read,
        Operation::Write,
        Operation::Subscribe,
        Operation::SubscriptionPolledRefresh,
        Operation::SubscriptionCancel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Operation::GetStatus => "GetStatus",
            Operation::Browse => "Browse",
            Operation::Read => "Read",
            Operation::Write => "Write",
            Operation::Subscribe => "Subscribe",
            Operation::SubscriptionPolledRefresh => "SubscriptionPolledRefresh",
            Operation::SubscriptionCancel => "SubscriptionCancel",
        }
    }

    pub fn parse(s: &str) -> Option<Operation> {
        Operation::ALL.into_iter().find(|op| op.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscribeItem {
    pub path: String,
    pub deadband: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RequestBody {
    GetStatus,
    Browse { device: String, path: String },
    Read { device: String, paths: Vec<String> },
    Write { device: String, writes: Vec<WriteRequest> },
    Subscribe {
        device: String,
        items: Vec<SubscribeItem>,
        ttl: Option<f64>,
    },
    SubscriptionPolledRefresh { handle: String },
    SubscriptionCancel { handle: String },
}

impl RequestBody {
    pub fn operation(&self) -> Operation {
        match self {
            RequestBody::GetStatus => Operation::GetStatus,
            RequestBody::Browse { .. } => Operation::Browse,
            RequestBody::Read { .. } => Operation::Read,
            RequestBody::Write { .. } => Operation::Write,
            RequestBody::Subscribe { .. } => Operation::Subscribe,
            RequestBody::SubscriptionPolledRefresh { .. } => Operation::SubscriptionPolledRefresh,
            RequestBody::SubscriptionCancel { .. } => Operation::SubscriptionCancel,
        }
    }

    /// Device addressed by the request, if any.
    pub fn device(&self) -> Option<&str> {
        match self {
            RequestBody::Browse { device, .. }
            | RequestBody::Read { device, .. }
            | RequestBody::Write { device, .. }
            | RequestBody::Subscribe { device, .. } => Some(device),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaRequest {
    pub client_handle: Option<String>,
    pub body: RequestBody,
}

impl DaRequest {
    pub fn new(body: RequestBody) -> Self {
        DaRequest {
            client_handle: None,
            body,
        }
    }

    pub fn with_handle(mut self, handle: &str) -> Self {
        self.client_handle = Some(handle.to_string());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultCode {
    Malformed,
    UnknownOp,
    UnknownDevice,
    UnknownHandle,
    UnknownPath,
}

impl FaultCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultCode::Malformed => "MALFORMED",
            FaultCode::UnknownOp => "UNKNOWN_OP",
            FaultCode::UnknownDevice => "UNKNOWN_DEVICE",
            FaultCode::UnknownHandle => "UNKNOWN_HANDLE",
            FaultCode::UnknownPath => "UNKNOWN_PATH",
        }
    }

    pub fn parse(s: &str) -> Option<FaultCode> {
        Some(match s {
            "MALFORMED" => FaultCode::Malformed,
            "UNKNOWN_OP" => FaultCode::UnknownOp,
            "UNKNOWN_DEVICE" => FaultCode::UnknownDevice,
            "UNKNOWN_HANDLE" => FaultCode::UnknownHandle,
            "UNKNOWN_PATH" => FaultCode::UnknownPath,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResponseBody {
    Status {
        start_time: Timestamp,
        device_count: usize,
    },
    Browse { elements: Vec<BrowseEntry> },
    Read { items: Vec<ItemValue> },
    Write { results: Vec<WriteResult> },
    Subscribe { handle: String, items: Vec<ItemValue> },
    Refresh { handle: String, items: Vec<ItemValue> },
    Cancel { handle: String },
    Fault { code: FaultCode, message: String },
}

impl ResponseBody {
    pub fn op_name(&self) -> &'static str {
        match self {
            ResponseBody::Status { .. } => "GetStatus",
            ResponseBody::Browse { .. } => "Browse",
            ResponseBody::Read { .. } => "Read",
            ResponseBody::Write { .. } => "Write",
            ResponseBody::Subscribe { .. } => "Subscribe",
            ResponseBody::Refresh { .. } => "SubscriptionPolledRefresh",
            ResponseBody::Cancel { .. } => "SubscriptionCancel",
            ResponseBody::Fault { .. } => "Fault",
        }
    }

    pub fn fault(code: FaultCode, message: impl Into<String>) -> Self {
        ResponseBody::Fault {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaResponse {
    pub client_handle: Option<String>,
    pub reply_time: Timestamp,
    pub body: ResponseBody,
}

impl DaResponse {
    pub fn fault_code(&self) -> Option<FaultCode> {
        match &self.body {
            ResponseBody::Fault { code, .. } => Some(*code),
            _ => None,
        }
    }
}
