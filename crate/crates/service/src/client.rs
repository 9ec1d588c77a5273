//! Minimal async client for the service API and its data-access endpoint.

use elab_core::protocol::{DaRequest, DaResponse, ResponseBody, decode_response, encode_request};
use serde_json::Value as Json;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    /// The request never produced an HTTP response.
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("undecodable response: {0}")]
    Decode(String),
    /// The data-access endpoint answered with a Fault.
    #[error("protocol fault {code}: {message}")]
    ProtocolFault { code: String, message: String },
}

#[derive(Debug, Clone)]
pub struct Api {
    base: String,
    token: Option<String>,
    http: reqwest::Client,
}

fn transport(e: reqwest::Error) -> ClientError {
    ClientError::Transport(e.to_string())
}

impl Api {
    pub fn new(base: &str, token: Option<&str>) -> Self {
        Api {
            base: base.trim_end_matches('/').to_string(),
            token: token.map(str::to_string),
            http: reqwest::Client::new(),
        }
    }

    pub fn with_token(&self, token: &str) -> Self {
        Api {
            token: Some(token.to_string()),
            ..self.clone()
        }
    }

    fn req(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let mut r = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            r = r.header("authorization", format!("Bearer {t}"));
        }
        r
    }

    async fn send(&self, r: reqwest::RequestBuilder) -> Result<(u16, Vec<u8>), ClientError> {
        let resp = r.send().await.map_err(transport)?;
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await.map_err(transport)?;
        Ok((status, bytes.to_vec()))
    }

    /// Status and JSON body of any call; non-JSON bodies become strings.
    pub async fn call(&self, method: &str, path: &str, body: Option<&Json>) -> Result<(u16, Json), ClientError> {
        let m = reqwest::Method::from_bytes(method.as_bytes()).map_err(|e| ClientError::Transport(e.to_string()))?;
        let mut r = self.req(m, path);
        if let Some(b) = body {
            r = r
                .header("content-type", "application/json")
                .body(serde_json::to_vec(b).expect("JSON values serialize"));
        }
        let (status, bytes) = self.send(r).await?;
        let json = serde_json::from_slice(&bytes).unwrap_or_else(|_| Json::String(String::from_utf8_lossy(&bytes).into()));
        Ok((status, json))
    }

    /// Like [`Api::call`] but any non-2xx status is an error.
    pub async fn ok(&self, method: &str, path: &str, body: Option<&Json>) -> Result<Json, ClientError> {
        let (status, json) = self.call(method, path, body).await?;
        if !(200..300).contains(&status) {
            return Err(ClientError::Http {
                status,
                body: json.to_string(),
            });
        }
        Ok(json)
    }

    pub async fn get(&self, path: &str) -> Result<Json, ClientError> {
        self.ok("GET", path, None).await
    }

    pub async fn post(&self, path: &str, body: &Json) -> Result<Json, ClientError> {
        self.ok("POST", path, Some(body)).await
    }

    pub async fn delete(&self, path: &str) -> Result<Json, ClientError> {
        self.ok("DELETE", path, None).await
    }

    pub async fn upload_package(&self, zip: Vec<u8>) -> Result<(u16, Json), ClientError> {
        let r = self
            .req(reqwest::Method::POST, "/packages")
            .header("content-type", "application/zip")
            .body(zip);
        let (status, bytes) = self.send(r).await?;
        let json = serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok((status, json))
    }

    /// Raw data-access exchange: body in, XML text out.
    pub async fn da_raw(&self, body: &[u8]) -> Result<String, ClientError> {
        let r = self
            .req(reqwest::Method::POST, "/da")
            .header("content-type", "application/xml")
            .body(body.to_vec());
        let (status, bytes) = self.send(r).await?;
        let text = String::from_utf8_lossy(&bytes).into_owned();
        if status != 200 {
            return Err(ClientError::Http { status, body: text });
        }
        Ok(text)
    }

    /// Typed data-access call. Faults come back as [`ClientError::ProtocolFault`].
    pub async fn da(&self, req: &DaRequest) -> Result<DaResponse, ClientError> {
        let text = self.da_raw(encode_request(req).as_bytes()).await?;
        let resp = decode_response(text.as_bytes()).map_err(|e| ClientError::Decode(e.message))?;
        if let ResponseBody::Fault { code, message } = &resp.body {
            return Err(ClientError::ProtocolFault {
                code: code.as_str().to_string(),
                message: message.clone(),
            });
        }
        Ok(resp)
    }

    /// Reads the event log from `since` without holding the stream open.
    pub async fn events(&self, since: u64) -> Result<Vec<Json>, ClientError> {
        let r = self.req(reqwest::Method::GET, &format!("/events?since={since}&follow=false"));
        let (status, bytes) = self.send(r).await?;
        if status != 200 {
            return Err(ClientError::Http {
                status,
                body: String::from_utf8_lossy(&bytes).into(),
            });
        }
        String::from_utf8_lossy(&bytes)
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ClientError::Decode(e.to_string())))
            .collect()
    }

    /// Opens the held-open event stream.
    pub async fn follow(&self, since: u64) -> Result<EventStream, ClientError> {
        let r = self.req(reqwest::Method::GET, &format!("/events?since={since}"));
        let resp = r.send().await.map_err(transport)?;
        if !resp.status().is_success() {
            return Err(ClientError::Http {
                status: resp.status().as_u16(),
                body: resp.text().await.unwrap_or_default(),
            });
        }
        Ok(EventStream {
            resp,
            buf: Vec::new(),
        })
    }
}

/// Line-at-a-time reader over `GET /events`.
#[derive(Debug)]
pub struct EventStream {
    resp: reqwest::Response,
    buf: Vec<u8>,
}

impl EventStream {
    /// Next event, or `None` when the server closed the stream.
    pub async fn next(&mut self) -> Result<Option<Json>, ClientError> {
        loop {
            if let Some(i) = self.buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = self.buf.drain(..=i).collect();
                return serde_json::from_slice(&line[..i])
                    .map(Some)
                    .map_err(|e| ClientError::Decode(e.to_string()));
            }
            match self.resp.chunk().await.map_err(transport)? {
                Some(c) => self.buf.extend_from_slice(&c),
                None => return Ok(None),
            }
        }
    }
}
