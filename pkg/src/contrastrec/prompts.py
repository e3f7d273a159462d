"""Prompt templates for profile augmentation and explanation generation.

Templates are organized by domain (product, movie, restaurant, hotel) and
polarity (positive, negative, profile, aspect, general, summary). Hotel,
restaurant, and product prompts use an [Instruction] / [Example Input] /
[Example Output] / [Input] block layout; movie prompts use a compact inline
form. History profiles are rendered in order, joined with " | ", with
sentinel-padded entries shown as "none".
"""
from __future__ import annotations

from dataclasses import dataclass

from .dataset import SENTINEL_ITEM, ItemProfile
from .errors import ValidationError

DOMAINS = ("product", "movie", "restaurant", "hotel")
POLARITIES = ("positive", "negative", "profile", "aspect", "general", "summary")

HISTORY_JOINER = " | "
SENTINEL_PLACEHOLDER = "none"

# How the favorable action reads per domain: (noun, past-tense verb phrase,
# negated verb phrase).
DOMAIN_WORDS = {
    "product": ("product", "purchased", "did not purchase"),
    "movie": ("movie", "watched", "did not watch"),
    "restaurant": ("restaurant", "visited", "did not visit"),
    "hotel": ("hotel", "stayed at", "did not stay at"),
}


@dataclass(frozen=True)
class PromptTemplate:
    domain: str
    polarity: str
    text: str

    def render(self, **slots) -> str:
        return self.text.format(**slots)


_PROFILE_BLOCKS = {
    "hotel": """[Instruction]

Create a succinct profile for a hotel based on its name. This profile should be tailored for use in recommendation systems and must identify the types of consumers who would enjoy the hotel.

[Example Input]

JW Marriott Hotel Hong Kong

[Example Output]

Revitalize body, mind, and spirit when you stay at the 5-star JW Marriott Hotel Hong Kong. Located above Pacific Place, enjoy the views over Victoria Harbour, the mountains, or the glittering downtown Hong Kong skyline.

[Input]

{item_text}""",
    "restaurant": """[Instruction]

Create a succinct profile for a restaurant based on its name. This profile should be tailored for use in recommendation systems and must identify the types of consumers who would enjoy the restaurant.

[Example Input]

Thrill Korean Steak and Bar

[Example Output]

Thrill Korean Steak and Bar brings a new concept to many people. We feature over 20 meat options to choose from that will be cooked at the table. Our fast-burning grills and our well-trained staff will bring an exceptional experience to many people.

[Input]

{item_text}""",
    "movie": """[Instruction]

Create a succinct profile for a movie based on the provided information. This profile should be tailored for use in recommendation systems and must identify the types of users who would enjoy the movie. Avoid repeating the given details directly and instead focus on describing the appeal and content of the movie in a way that highlights its potential audience:

[Example Input]

Title: Barefoot Contessa (with Ina Garten), Entertaining With Ina Vol. 2 (3 Pack): Brunch 'n' Lunch, Picnic Parties, Summer Entertaining

[Example Output]

This series, hosted by Ina Garten, delves into crafting simple yet sophisticated dishes suitable for both daily meals and special events. Ideal for viewers who relish home cooking shows, seek practical entertaining tips, and aspire to refine their cooking skills under the guidance of a celebrated chef.

[Input]

{item_text}""",
    "product": """[Instruction]

Create a succinct profile for a product based on its name. This profile should be tailored for use in recommendation systems and must identify the types of consumers who would enjoy the product.

[Example Input]

Stainless Steel French Press

[Example Output]

Brew rich, full-bodied coffee with this durable stainless steel French press. A natural fit for coffee enthusiasts who value a hands-on ritual, and for households that want a sturdy, dishwasher-safe brewer without disposable filters.

[Input]

{item_text}""",
}


def _block_explanation(noun: str, verb: str) -> str:
    cap = noun.capitalize()
    return f"""[Instruction]

Provide a reason for why this consumer {verb} the current {noun}, based on the provided profiles of the past {noun}s the consumer engaged with and the profile of the current {noun}. Answer with exactly one sentence with the following format: "The consumer {verb} this {noun} because the consumer ... and the {noun} ..."

[Input]

Past {cap} Profiles: {{profile_seq}}

Current {cap} Profile: {{recommended_profile}}"""


def _movie_explanation(verb: str) -> str:
    return ("Given the profiles of the watching history of this consumer {profile_seq}, "
            f"can you provide a reason for why this consumer {verb} the following "
            "recommended movie with profile {recommended_profile}? Answer with one "
            f"sentence with the following format: The consumer {verb} this movie because...")


def _aspect_prompt(noun: str) -> str:
    return ("Given the profiles of the consumption history of this consumer "
            "{profile_seq}, can you generate a series of aspect terms that represent "
            f"the most important properties of the candidate {noun} with profile "
            "{recommended_profile} that the consumer might consider?")


def _general_prompt(noun: str, verb: str, neg_verb: str) -> str:
    return ("Based on the provided profiles of the past "
            f"{noun}s this consumer engaged with {{profile_seq}}, infer whether the "
            f"consumer would enjoy the current {noun} with profile "
            "{recommended_profile} and provide a one-sentence general explanation "
            f"of the form: The consumer {verb} (or {neg_verb}) this {noun} because...")


def _summary_prompt(noun: str) -> str:
    return ("Given the profiles of the consumption history of this consumer "
            "{profile_seq}, can you provide a summary of the consumer preference "
            f"of candidate {noun}s?")


def _build_templates() -> dict:
    templates = {}
    for domain in DOMAINS:
        noun, verb, neg_verb = DOMAIN_WORDS[domain]
        if domain == "movie":
            pos = _movie_explanation(verb)
            neg = _movie_explanation(neg_verb)
        else:
            pos = _block_explanation(noun, verb)
            neg = _block_explanation(noun, neg_verb)
        templates[(domain, "positive")] = PromptTemplate(domain, "positive", pos)
        templates[(domain, "negative")] = PromptTemplate(domain, "negative", neg)
        templates[(domain, "profile")] = PromptTemplate(domain, "profile",
                                                        _PROFILE_BLOCKS[domain])
        templates[(domain, "aspect")] = PromptTemplate(domain, "aspect", _aspect_prompt(noun))
        templates[(domain, "general")] = PromptTemplate(domain, "general",
                                                        _general_prompt(noun, verb, neg_verb))
        templates[(domain, "summary")] = PromptTemplate(domain, "summary", _summary_prompt(noun))
    return templates


TEMPLATES = _build_templates()


def get_template(domain: str, polarity: str) -> PromptTemplate:
    try:
        return TEMPLATES[(domain, polarity)]
    except KeyError:
        raise ValidationError(
            f"no prompt template for domain={domain!r}, polarity={polarity!r}"
        ) from None


def render_history(history_profiles) -> str:
    """Join history profile texts in order; None entries render as the placeholder."""
    parts = [text if text else SENTINEL_PLACEHOLDER for text in history_profiles]
    return HISTORY_JOINER.join(parts)


def build_profile_prompt(item: ItemProfile, domain: str) -> str:
    """Prompt asking the backend to expand an item name into a rich profile."""
    if not item.name:
        raise ValidationError(f"item {item.item_id!r} has an empty name")
    return get_template(domain, "profile").render(item_text=item.name)


def build_explanation_prompt(history_profiles, candidate_profile: str,
                             polarity: str, domain: str) -> str:
    """Prompt asking for an explanation of the given polarity.

    ``history_profiles`` is an ordered list of profile texts (None or "" for
    sentinel-padded slots); ``candidate_profile`` describes the candidate.
    """
    if polarity == "profile":
        raise ValidationError("use build_profile_prompt for profile prompts")
    if not candidate_profile:
        raise ValidationError("candidate profile must be non-empty")
    if not history_profiles:
        raise ValidationError("history must contain at least one entry")
    template = get_template(domain, polarity)
    return template.render(profile_seq=render_history(history_profiles),
                           recommended_profile=candidate_profile)


def history_texts(record, profiles_by_id) -> list:
    """Profile texts for a record's history; sentinel slots map to None."""
    texts = []
    for item_id in record.history:
        if item_id == SENTINEL_ITEM:
            texts.append(None)
        else:
            prof = profiles_by_id.get(item_id)
            texts.append(prof.text() if prof is not None else item_id)
    return texts
