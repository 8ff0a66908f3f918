//! PetriNet-style input gating: one place per input parameter, one
//! transition per agent. Tokens are consumed FIFO.

use std::collections::{BTreeMap, VecDeque};

use serde_json::Value as Json;

use super::descriptor::{ParamSpec, TriggerPolicy};
use crate::stream::StreamId;
use crate::value::{json_text, Value};

/// Inputs handed to one processor invocation, keyed by parameter name.
pub type InputTuple = BTreeMap<String, Value>;

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub value: Value,
    /// Message the token came from, when it came from a stream.
    pub source: Option<(StreamId, u64)>,
}

impl Token {
    pub fn new(value: Value) -> Self {
        Self { value, source: None }
    }

    pub fn from_message(value: Value, stream: StreamId, seq: u64) -> Self {
        Self {
            value,
            source: Some((stream, seq)),
        }
    }

    /// Pairing key: a field of a record or event payload.
    pub fn key(&self, key: &str) -> Option<String> {
        let field = match &self.value {
            Value::Record(r) => r.get(key),
            Value::Event(e) => e.data.get(key),
            _ => None,
        }?;
        match field {
            Json::Null => None,
            other => Some(json_text(other)),
        }
    }
}

#[derive(Clone, Debug)]
struct Place {
    name: String,
    required: bool,
    default: Option<Value>,
    tokens: VecDeque<Token>,
}

#[derive(Debug)]
pub struct UnknownPlace(pub String);

#[derive(Clone, Debug)]
pub struct TriggerState {
    places: Vec<Place>,
    policy: TriggerPolicy,
}

impl TriggerState {
    pub fn new(inputs: &[ParamSpec], policy: TriggerPolicy) -> Self {
        Self {
            places: inputs
                .iter()
                .map(|p| Place {
                    name: p.name.clone(),
                    required: p.required,
                    default: p.default.clone(),
                    tokens: VecDeque::new(),
                })
                .collect(),
            policy,
        }
    }

    pub fn deposit(&mut self, param: &str, token: Token) -> Result<(), UnknownPlace> {
        let place = self
            .places
            .iter_mut()
            .find(|p| p.name == param)
            .ok_or_else(|| UnknownPlace(param.to_string()))?;
        place.tokens.push_back(token);
        Ok(())
    }

    pub fn depth(&self, param: &str) -> usize {
        self.places
            .iter()
            .find(|p| p.name == param)
            .map(|p| p.tokens.len())
            .unwrap_or(0)
    }

    pub fn depths(&self) -> BTreeMap<String, usize> {
        self.places.iter().map(|p| (p.name.clone(), p.tokens.len())).collect()
    }

    /// Fires while enabled and returns one tuple per firing.
    pub fn fire(&mut self) -> Vec<InputTuple> {
        let mut fired = Vec::new();
        while let Some(t) = self.fire_once() {
            fired.push(t);
        }
        fired
    }

    pub fn fire_once(&mut self) -> Option<InputTuple> {
        match self.policy.clone() {
            TriggerPolicy::AllPlaces => self.fire_all_places(),
            TriggerPolicy::Paired { key } => self.fire_paired(&key),
        }
    }

    fn gating_indices(&self) -> Vec<usize> {
        let required: Vec<usize> = (0..self.places.len()).filter(|&i| self.places[i].required).collect();
        if required.is_empty() {
            (0..self.places.len()).collect()
        } else {
            required
        }
    }

    fn fire_all_places(&mut self) -> Option<InputTuple> {
        if self.places.is_empty() {
            return None;
        }
        let has_required = self.places.iter().any(|p| p.required);
        let enabled = if has_required {
            self.places.iter().filter(|p| p.required).all(|p| !p.tokens.is_empty())
        } else {
            self.places.iter().any(|p| !p.tokens.is_empty())
        };
        if !enabled {
            return None;
        }
        let mut tuple = InputTuple::new();
        for place in &mut self.places {
            if let Some(token) = place.tokens.pop_front() {
                tuple.insert(place.name.clone(), token.value);
            } else if let Some(d) = &place.default {
                tuple.insert(place.name.clone(), d.clone());
            }
        }
        Some(tuple)
    }

    fn fire_paired(&mut self, key: &str) -> Option<InputTuple> {
        let gating = self.gating_indices();
        let first = *gating.first()?;
        let candidate = self.places[first].tokens.iter().find_map(|t| {
            let k = t.key(key)?;
            gating
                .iter()
                .all(|&i| self.places[i].tokens.iter().any(|o| o.key(key).as_deref() == Some(&k)))
                .then_some(k)
        })?;
        let mut tuple = InputTuple::new();
        for (i, place) in self.places.iter_mut().enumerate() {
            let pos = place
                .tokens
                .iter()
                .position(|t| t.key(key).as_deref() == Some(candidate.as_str()));
            match pos {
                Some(pos) if gating.contains(&i) || !place.required => {
                    let token = place.tokens.remove(pos).expect("position in range");
                    tuple.insert(place.name.clone(), token.value);
                }
                _ => {
                    if let Some(d) = &place.default {
                        tuple.insert(place.name.clone(), d.clone());
                    }
                }
            }
        }
        Some(tuple)
    }
}
