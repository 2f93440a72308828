from enum import Enum

# Order follows the argument list of the glucose difference equation.
VARIABLES = ("G", "B_I", "I_B", "F_ch", "HR", "C", "S")
VAR_INDEX = {name: i for i, name in enumerate(VARIABLES)}

SEGMENT_LENGTH = 17
MEAL_INDEX = 8
HORIZONS = 8
STEP_MINUTES = 15


class VariableId(str, Enum):
    G = "G"
    B_I = "B_I"
    I_B = "I_B"
    F_ch = "F_ch"
    HR = "HR"
    C = "C"
    S = "S"


DESCRIPTIONS = {
    "G": ("glucose", "mg/dL"),
    "B_I": ("basal insulin", "U"),
    "I_B": ("insulin bolus", "U"),
    "F_ch": ("carbohydrates", "g"),
    "HR": ("heart rate", "bpm"),
    "C": ("calories burned", "kcal"),
    "S": ("steps", "count"),
}
