use std::collections::BTreeMap;

use super::{Device, DeviceError};

/// All devices known to a service, by id.
#[derive(Debug, Default)]
pub struct DeviceRegistry {
    devices: BTreeMap<String, Device>,
}

impl DeviceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, device: Device) {
        self.devices.insert(device.id().to_string(), device);
    }

    pub fn remove(&mut self, id: &str) -> Option<Device> {
        self.devices.remove(id)
    }

    pub fn get(&self, id: &str) -> Result<&Device, DeviceError> {
        self.devices
            .get(id)
            .ok_or_else(|| DeviceError::UnknownDevice(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Device, DeviceError> {
        self.devices
            .get_mut(id)
            .ok_or_else(|| DeviceError::UnknownDevice(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.devices.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.devices.keys().map(String::as_str)
    }
}
