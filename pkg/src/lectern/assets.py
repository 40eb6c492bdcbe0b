"""Access to bundled text assets: prompt templates and dialect templates.

Assets are versioned by file name (e.g. ``skeletonize_v1``) so run traces
can pin the exact template a call used.  Templates use ``string.Template``
placeholders; prompt templates mark the slot for structured input with a
literal ``<<INPUT>>`` token.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

_ROOT = resources.files(__package__) / "assets"


class AssetError(KeyError):
    """Requested asset is not bundled with the package."""


@lru_cache(maxsize=None)
def load_text(relpath: str) -> str:
    """Raw text of a bundled asset, e.g. ``prompts/composer/skeletonize_v1.txt``."""
    try:
        return _ROOT.joinpath(relpath).read_text(encoding="utf-8")
    except (FileNotFoundError, NotADirectoryError):
        raise AssetError(f"no bundled asset {relpath!r}") from None


def prompt_template(agent: str, name: str) -> tuple[str, str]:
    """(asset id, template text) for a named prompt, e.g. ("composer", "skeletonize_v1")."""
    asset_id = f"prompts/{agent}/{name}.txt"
    return asset_id, load_text(asset_id)


def render_prompt(template_text: str, structured_input: str) -> str:
    """Substitute the structured input block into a prompt template."""
    if "<<INPUT>>" not in template_text:
        raise AssetError("prompt template lacks an <<INPUT>> slot")
    return template_text.replace("<<INPUT>>", structured_input)


@lru_cache(maxsize=None)
def dialect_template(dialect: str, name: str) -> Template:
    """A dialect code template, e.g. ("manim-ce", "event_wait")."""
    return Template(load_text(f"dialects/{dialect}/{name}.txt"))


def llm_payload(agent: str, template_name: str, input_value: dict) -> dict:
    """Chat-style request payload for an agent call.

    Carries both the rendered prompt (what a real HTTP backend consumes)
    and the structured `input` block (what the offline template transport
    reads), plus the prompt asset id so traces pin the template version.
    """
    from .canonical import canonical_dumps

    asset_id, text = prompt_template(agent, template_name)
    rendered = render_prompt(text, canonical_dumps(input_value))
    return {
        "input": input_value,
        "messages": [{"content": rendered, "role": "user"}],
        "prompt_asset": asset_id,
    }
