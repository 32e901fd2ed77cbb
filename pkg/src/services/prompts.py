"""
Prompt text shared by the CoT builder and the inference gateway
"""

from dataclasses import dataclass
from typing import Any, Dict

COT_SYSTEM_PROMPT = (
    "You are a powerful text-to-SQL model. Your role is to answer user questions by generating "
    "SQL queries against a given database schema. First, provide a step-by-step chain of thought "
    "that explains your reasoning, and then provide the final SQL query in a markdown code block."
)

DIRECT_SYSTEM_PROMPT = (
    "You are a powerful text-to-SQL model. Your role is to answer user questions by generating "
    "SQL queries against a given database schema. Respond with only the final SQL query in a "
    "markdown code block tagged sql, without any explanation."
)

SELF_CORRECTION_DIRECTIVE = (
    "Before giving the final query, re-verify column names and syntax against the schema: "
    "every table and column you use must appear in it exactly as written."
)

STEP_OUTLINE = (
    "Structure your reasoning in five steps: Query Analysis, Table Selection, Column Selection, "
    "Logic & Join Strategy, Self-Validation."
)

SCHEMA_HEADER = "DATABASE SCHEMA:"
QUESTION_PREFIX = "Question: "


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def to_dict(self) -> Dict[str, str]:
        return {"role": self.role, "content": self.content}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ChatMessage":
        return cls(role=str(data["role"]), content=str(data["content"]))


def user_content(description_text: str, question: str) -> str:
    """The schema-then-question user message"""
    return f"{SCHEMA_HEADER}\n{description_text}\n\n{QUESTION_PREFIX}{question}"


def with_directives(system_prompt: str, *directives: str) -> str:
    parts = [system_prompt] + [d for d in directives if d]
    return " ".join(parts)
