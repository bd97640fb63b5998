//! Built-in closed vocabulary: slot types with their value words, the
//! continual-learning domain catalog, and the word pools used to build the
//! backbone pretraining corpus.

/// A slot type and the single-word values it can take.
pub struct SlotType {
    pub name: &'static str,
    pub values: &'static [&'static str],
}

pub const SLOT_TYPES: &[SlotType] = &[
    SlotType {
        name: "city",
        values: &["paris", "london", "tokyo", "berlin", "madrid", "rome", "boston", "seattle", "chicago", "denver"],
    },
    SlotType {
        name: "area",
        values: &["downtown", "uptown", "midtown", "harbor", "suburbs", "riverside", "oldtown"],
    },
    SlotType {
        name: "date",
        values: &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"],
    },
    SlotType {
        name: "time",
        values: &["morning", "noon", "afternoon", "evening", "night", "midnight"],
    },
    SlotType {
        name: "people",
        values: &["one", "two", "three", "four", "five", "six"],
    },
    SlotType {
        name: "price",
        values: &["cheap", "moderate", "expensive", "pricey", "affordable"],
    },
    SlotType {
        name: "cuisine",
        values: &["italian", "chinese", "mexican", "indian", "thai", "french", "korean"],
    },
    SlotType {
        name: "stars",
        values: &["onestar", "twostar", "threestar", "fourstar", "fivestar"],
    },
    SlotType {
        name: "airline",
        values: &["delta", "united", "alaska", "jetblue", "lufthansa"],
    },
    SlotType {
        name: "seat",
        values: &["window", "aisle", "economy", "business", "firstclass"],
    },
    SlotType {
        name: "genre",
        values: &["rock", "jazz", "pop", "blues", "classical", "country"],
    },
    SlotType {
        name: "artist",
        values: &["adele", "drake", "shakira", "coldplay", "beyonce", "queen"],
    },
    SlotType {
        name: "cartype",
        values: &["sedan", "suv", "compact", "minivan", "convertible", "pickup"],
    },
];

pub fn slot_type(name: &str) -> Option<&'static SlotType> {
    SLOT_TYPES.iter().find(|s| s.name == name)
}

/// A continual-learning domain. Every user template holds exactly one
/// `{slot}` placeholder naming one of the domain's slots.
pub struct Domain {
    pub name: &'static str,
    pub slots: &'static [&'static str],
    pub openers: &'static [&'static str],
    pub user: &'static [(&'static str, &'static str)],
    pub system: &'static [&'static str],
}

pub const DOMAINS: &[Domain] = &[
    Domain {
        name: "hotels_1",
        slots: &["city", "date", "people", "stars"],
        openers: &["hotel lodging reservation needed", "book hotel suite lodging"],
        user: &[
            ("city", "hotel suite lodging near {city}"),
            ("date", "hotel checkin {date} lodging"),
            ("people", "hotel suite sleeps {people} guests"),
            ("stars", "{stars} hotel lodging rating"),
        ],
        system: &[
            "which hotel lodging location",
            "hotel checkin day",
            "hotel guests count",
            "hotel lodging rating preference",
            "searching hotel suites",
        ],
    },
    Domain {
        name: "flights_1",
        slots: &["city", "date", "airline", "seat"],
        openers: &["flight airplane booking wanted", "book airplane flight ticket"],
        user: &[
            ("city", "flight landing {city} airport"),
            ("date", "flight departing {date} airport"),
            ("airline", "flying {airline} airways flight"),
            ("seat", "{seat} cabin seat onboard plane"),
        ],
        system: &[
            "which flight destination airport",
            "flight departure day",
            "preferred airline carrier",
            "which plane cabin class",
            "checking flight itineraries",
        ],
    },
    Domain {
        name: "restaurants_1",
        slots: &["area", "time", "people", "cuisine"],
        openers: &["hungry dinner restaurant table", "restaurant meal reservation wanted"],
        user: &[
            ("area", "restaurant table near {area} district"),
            ("time", "dinner seating {time} restaurant"),
            ("people", "restaurant table seating {people} diners"),
            ("cuisine", "craving {cuisine} food dishes"),
        ],
        system: &[
            "which dining neighborhood",
            "dinner hour preference",
            "restaurant diners count",
            "which dishes craving",
            "browsing restaurant menus",
        ],
    },
    Domain {
        name: "music_1",
        slots: &["genre", "artist"],
        openers: &["play music songs playlist", "music speaker songs queue"],
        user: &[
            ("genre", "play {genre} music songs"),
            ("artist", "songs by {artist} playlist speaker"),
        ],
        system: &[
            "which music style",
            "favorite singer songs",
            "queueing music playlist",
            "speaker volume turned up",
        ],
    },
    Domain {
        name: "rentalcars_2",
        slots: &["city", "date", "cartype"],
        openers: &["rental car vehicle needed", "rent car vehicle wheels"],
        user: &[
            ("city", "rental car collect {city}"),
            ("date", "rental car keys {date}"),
            ("cartype", "{cartype} rental vehicle drive"),
        ],
        system: &[
            "which rental counter",
            "rental collection day",
            "which vehicle size",
            "checking rental garage inventory",
        ],
    },
    Domain {
        name: "trains_1",
        slots: &["city", "date", "time", "price"],
        openers: &["train rail journey ticket", "railway train seat booking"],
        user: &[
            ("city", "train ticket toward {city} station"),
            ("date", "railway ride {date} train"),
            ("time", "train boarding {time} carriage"),
            ("price", "{price} train fare ticket"),
        ],
        system: &[
            "which train station destination",
            "rail travel date",
            "train departure hour",
            "train fare budget",
            "scanning railway timetable",
        ],
    },
    Domain {
        name: "homes_2",
        slots: &["area", "price", "people"],
        openers: &["apartment housing search", "rent apartment flat housing"],
        user: &[
            ("area", "apartment flat located {area}"),
            ("price", "monthly apartment rent {price}"),
            ("people", "housing for {people} tenants roommates"),
        ],
        system: &[
            "which apartment area living",
            "apartment rent range",
            "tenants roommates count",
            "pulling apartment listings",
        ],
    },
];

/// Twin domains share every surface template with their source domain and
/// track a subset of its slots under a different task name.
pub struct Twin {
    pub name: &'static str,
    pub source: &'static str,
    pub slots: &'static [&'static str],
}

pub const TWINS: &[Twin] = &[
    Twin {
        name: "flights_3",
        source: "flights_1",
        slots: &["city", "date", "seat"],
    },
    Twin {
        name: "hotels_3",
        source: "hotels_1",
        slots: &["city", "date", "stars"],
    },
    Twin {
        name: "restaurants_2",
        source: "restaurants_1",
        slots: &["area", "time", "cuisine"],
    },
];

/// Task names used only by the pretraining corpus.
pub const PRETRAIN_NAMES: &[&str] = &[
    "svc_alpha", "svc_bravo", "svc_charlie", "svc_delta", "svc_echo", "svc_foxtrot", "svc_golf", "svc_hotel",
    "svc_india", "svc_juliet", "svc_kilo", "svc_lima", "svc_mike", "svc_november", "svc_oscar", "svc_papa",
    "svc_quebec", "svc_romeo", "svc_sierra", "svc_tango", "svc_uniform", "svc_victor", "svc_whiskey", "svc_xray",
];

/// Connective words for pretraining utterances; none appears in a domain template.
pub const PRETRAIN_WORDS: &[&str] = &[
    "okay", "thanks", "maybe", "sounds", "good", "great", "yes", "no", "sure", "right", "also", "then", "just",
    "actually", "well", "hmm", "perfect", "fine", "really", "could", "would", "should", "let", "us", "see", "about",
    "think", "that", "works", "something", "anything", "else", "there", "here", "what", "when", "thing", "need",
    "want", "like", "get", "go", "make", "know", "tell", "give", "take", "look", "find", "more", "some", "any",
    "please", "now", "later", "today", "soon", "very", "much", "it", "them", "you", "me", "my", "your", "our",
];

pub const COPY_TASK: &str = "<copy>";
pub const FILL: &str = "<fill>";

pub fn slot_marker(slot: &str) -> String {
    format!("<slot:{slot}>")
}

/// Largest slot count of any built-in task or pretraining instruction.
pub const MAX_SLOTS: usize = 4;
