use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    DaRequest, DaResponse, FaultCode, RequestBody, ResponseBody, SubscribeItem, decode_request,
    encode_response,
};
use crate::clock::Timestamp;
use crate::device::{DeviceError, DeviceRegistry, ItemValue, Quality};
use crate::types::Value;

/// Seconds a subscription survives without a refresh unless the client asks otherwise.
pub const DEFAULT_TTL: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionItem {
    pub path: String,
    pub deadband: f64,
    /// Last value and quality delivered to the client.
    pub last_value: Option<Value>,
    pub last_quality: Quality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub handle: String,
    pub device_id: String,
    pub items: Vec<SubscriptionItem>,
    pub ttl: f64,
    pub last_refresh: Timestamp,
}

impl Subscription {
    pub fn expired_at(&self, now: Timestamp) -> bool {
        now - self.last_refresh > self.ttl
    }
}

/// True when `cur` must be reported to a client that last saw `last`.
pub(crate) fn changed(item: &SubscriptionItem, cur: &ItemValue) -> bool {
    if cur.quality != item.last_quality {
        return true;
    }
    match (&item.last_value, &cur.value) {
        (None, None) => false,
        (Some(a), Some(b)) => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) if a.data_type() == b.data_type() => (y - x).abs() > item.deadband,
            _ => a != b,
        },
        _ => true,
    }
}

/// Protocol endpoint: decodes requests, dispatches them to devices and
/// tracks polled subscriptions.
#[derive(Debug)]
pub struct DaServer {
    start_time: Timestamp,
    default_ttl: f64,
    next_handle: u64,
    subscriptions: BTreeMap<String, Subscription>,
}

impl DaServer {
    pub fn new(start_time: Timestamp) -> Self {
        DaServer {
            start_time,
            default_ttl: DEFAULT_TTL,
            next_handle: 1,
            subscriptions: BTreeMap::new(),
        }
    }

    pub fn with_default_ttl(mut self, ttl: f64) -> Self {
        self.default_ttl = ttl;
        self
    }

    /// Continues handle numbering, e.g. past handles issued before a restart.
    pub fn with_first_handle(mut self, n: u64) -> Self {
        self.next_handle = n.max(1);
        self
    }

    pub fn subscription(&self, handle: &str) -> Option<&Subscription> {
        self.subscriptions.get(handle)
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subscriptions.values()
    }

    pub fn subscription_count(&self) -> usize {
        self.subscriptions.len()
    }

    /// Drops subscriptions that have not been refreshed within their ttl.
    pub fn purge_expired(&mut self, now: Timestamp) -> Vec<String> {
        let dead: Vec<String> = self
            .subscriptions
            .values()
            .filter(|s| s.expired_at(now))
            .map(|s| s.handle.clone())
            .collect();
        for h in &dead {
            self.subscriptions.remove(h);
        }
        dead
    }

    /// Drops every subscription on `device_id`, e.g. when a twin is torn down.
    pub fn drop_device(&mut self, device_id: &str) {
        self.subscriptions.retain(|_, s| s.device_id != device_id);
    }

    /// Wire entry point. Never fails: problems become Fault responses.
    pub fn handle_bytes(&mut self, devices: &mut DeviceRegistry, body: &[u8], now: Timestamp) -> String {
        let resp = match decode_request(body) {
            Ok(req) => self.handle(devices, req, now),
            Err(e) => DaResponse {
                client_handle: e.client_handle,
                reply_time: now,
                body: ResponseBody::fault(e.code, e.message),
            },
        };
        encode_response(&resp)
    }

    pub fn handle(&mut self, devices: &mut DeviceRegistry, req: DaRequest, now: Timestamp) -> DaResponse {
        self.purge_expired(now);
        let body = self
            .dispatch(devices, req.body, now)
            .unwrap_or_else(|(code, msg)| ResponseBody::fault(code, msg));
        DaResponse {
            client_handle: req.client_handle,
            reply_time: now,
            body,
        }
    }

    fn dispatch(
        &mut self,
        devices: &mut DeviceRegistry,
        body: RequestBody,
        now: Timestamp,
    ) -> Result<ResponseBody, (FaultCode, String)> {
        let unknown_device = |id: &str| (FaultCode::UnknownDevice, format!("no device `{id}`"));
        match body {
            RequestBody::GetStatus => Ok(ResponseBody::Status {
                start_time: self.start_time,
                device_count: devices.len(),
            }),
            RequestBody::Browse { device, path } => {
                let d = devices.get_mut(&device).map_err(|_| unknown_device(&device))?;
                match d.browse(&path) {
                    Ok(elements) => Ok(ResponseBody::Browse { elements }),
                    Err(DeviceError::UnknownPath(p)) => {
                        Err((FaultCode::UnknownPath, format!("no path `{p}` on `{device}`")))
                    }
                    Err(e) => Err((FaultCode::Malformed, e.to_string())),
                }
            }
            RequestBody::Read { device, paths } => {
                let d = devices.get_mut(&device).map_err(|_| unknown_device(&device))?;
                Ok(ResponseBody::Read { items: d.read(&paths) })
            }
            RequestBody::Write { device, writes } => {
                let d = devices.get_mut(&device).map_err(|_| unknown_device(&device))?;
                Ok(ResponseBody::Write { results: d.write(&writes) })
            }
            RequestBody::Subscribe { device, items, ttl } => {
                let d = devices.get_mut(&device).map_err(|_| unknown_device(&device))?;
                if let Some(bad) = items.iter().find(|i| !(i.deadband >= 0.0)) {
                    return Err((
                        FaultCode::Malformed,
                        format!("negative deadband on `{}`", bad.path),
                    ));
                }
                let paths: Vec<String> = items.iter().map(|i| i.path.clone()).collect();
                let values = d.read(&paths);
                let sub_items = items
                    .iter()
                    .zip(&values)
                    .map(|(SubscribeItem { path, deadband }, v)| {
                        let numeric = d
                            .descriptor()
                            .item(path)
                            .is_some_and(|it| it.data_type.is_numeric());
                        SubscriptionItem {
                            path: path.clone(),
                            deadband: if numeric { *deadband } else { 0.0 },
                            last_value: v.value.clone(),
                            last_quality: v.quality,
                        }
                    })
                    .collect();
                let handle = format!("sub-{}", self.next_handle);
                self.next_handle += 1;
                self.subscriptions.insert(
                    handle.clone(),
                    Subscription {
                        handle: handle.clone(),
                        device_id: device,
                        items: sub_items,
                        ttl: ttl.unwrap_or(self.default_ttl),
                        last_refresh: now,
                    },
                );
                Ok(ResponseBody::Subscribe { handle, items: values })
            }
            RequestBody::SubscriptionPolledRefresh { handle } => {
                let unknown = || (FaultCode::UnknownHandle, format!("no subscription `{handle}`"));
                let sub = self.subscriptions.get_mut(&handle).ok_or_else(unknown)?;
                let Ok(d) = devices.get_mut(&sub.device_id) else {
                    // The device went away; the subscription goes with it.
                    self.subscriptions.remove(&handle);
                    return Err(unknown());
                };
                sub.last_refresh = now;
                let paths: Vec<String> = sub.items.iter().map(|i| i.path.clone()).collect();
                let current = d.read(&paths);
                let mut items = Vec::new();
                for (it, cur) in sub.items.iter_mut().zip(current) {
                    if changed(it, &cur) {
                        it.last_value = cur.value.clone();
                        it.last_quality = cur.quality;
                        items.push(cur);
                    }
                }
                Ok(ResponseBody::Refresh { handle, items })
            }
            RequestBody::SubscriptionCancel { handle } => {
                if self.subscriptions.remove(&handle).is_none() {
                    return Err((FaultCode::UnknownHandle, format!("no subscription `{handle}`")));
                }
                Ok(ResponseBody::Cancel { handle })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(deadband: f64, last: f64) -> SubscriptionItem {
        SubscriptionItem {
            path: "x".into(),
            deadband,
            last_value: Some(Value::Float(last)),
            last_quality: Quality::Good,
        }
    }

    fn cur(v: Option<Value>, q: Quality) -> ItemValue {
        ItemValue {
            path: "x".into(),
            value: v,
            quality: q,
            timestamp: Timestamp::ZERO,
        }
    }

    #[test]
    fn deadband_is_strict() {
        let it = item(0.5, 1.0);
        assert!(!changed(&it, &cur(Some(Value::Float(1.5)), Quality::Good)));
        assert!(changed(&it, &cur(Some(Value::Float(1.5001)), Quality::Good)));
        assert!(changed(&it, &cur(Some(Value::Float(0.4)), Quality::Good)));
    }

    #[test]
    fn quality_change_always_reported() {
        let it = item(10.0, 1.0);
        assert!(changed(&it, &cur(Some(Value::Float(1.0)), Quality::Uncertain)));
        assert!(changed(&it, &cur(None, Quality::Good)));
    }
}
