"""
Blockworld: детерминированная синтетическая настольная среда.

Поле 8x8 клеток рисуется в изображение 32x32 RGB, каждая клетка - одна
одноцветная заплатка 4x4 из палитры в 16 цветов. Среда выдаёт шаблонные
инструкции, вопросы-ответы, демонстрации скриптового эксперта и цепочки
задач для оценки.

Координаты клетки: (x = столбец, y = строка), начало в левом верхнем углу.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InfeasibleTaskError

Cell = Tuple[int, int]

GRID = 8
CELL_PX = 4
IMAGE_SIZE = GRID * CELL_PX

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
HELD_OUT_COLOR = "orange"
TRAIN_COLORS = tuple(c for c in COLORS if c != HELD_OUT_COLOR)

BACKGROUNDS = ("A", "B", "C", "D")
TRAIN_BACKGROUNDS = BACKGROUNDS[:3]

SPLITS = ("train", "eval_seen", "eval_unseen_bg", "eval_unseen_color")

LEFT_ZONE: FrozenSet[Cell] = frozenset({(0, 3), (1, 3), (0, 4), (1, 4)})
RIGHT_ZONE: FrozenSet[Cell] = frozenset({(6, 3), (7, 3), (6, 4), (7, 4)})
ZONES: Dict[str, FrozenSet[Cell]] = {"left": LEFT_ZONE, "right": RIGHT_ZONE}

TASK_KINDS = ("move_block_to_zone", "press_button", "stack_block_on_block", "pick_block")

# (имя, RGB); индекс в списке - код палитры
PALETTE: Tuple[Tuple[str, Tuple[int, int, int]], ...] = (
    ("background_A", (205, 190, 160)),
    ("background_B", (165, 190, 205)),
    ("background_C", (185, 205, 165)),
    ("background_D", (95, 90, 110)),
    ("zone_left", (235, 235, 235)),
    ("zone_right", (55, 55, 55)),
    ("button_off", (130, 120, 120)),
    ("button_lit", (255, 255, 200)),
    ("gripper_empty", (0, 0, 0)),
    ("gripper_holding", (90, 45, 10)),
    ("red", (220, 30, 30)),
    ("green", (30, 175, 60)),
    ("blue", (40, 70, 220)),
    ("yellow", (240, 215, 40)),
    ("purple", (150, 60, 190)),
    ("orange", (250, 140, 20)),
)
PALETTE_RGB = np.array([rgb for _, rgb in PALETTE], dtype=np.uint8)
PALETTE_CODE = {name: code for code, (name, _) in enumerate(PALETTE)}

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven")

# закрытая грамматика инструкций, описаний и вопросов
GRAMMAR_WORDS: Tuple[str, ...] = (
    "move", "block", "to", "left", "right", "zone", "press", "the", "button",
    "stack", "on", "pick", "up",
    *COLORS,
    "upleft", "upright", "downleft", "downright", "leftzone", "rightzone",
    "held", "lit", "off", ",",
    "describe", "this", "image", "is", "there", "a", "?", "yes", "no",
    "what", "color", "in", "gripper", "holding", "nothing", "none", "of",
    "above", "below", "at", "row", "column",
    *NUMBER_WORDS,
)

DESCRIBE_PROMPT = "describe this image"


@dataclass(frozen=True)
class Block:
    color: str
    cell: Cell
    stacked_on: Optional[int] = None


@dataclass(frozen=True)
class Gripper:
    cell: Cell
    holding: Optional[int] = None
    closed: bool = False


@dataclass(frozen=True)
class Button:
    cell: Cell
    lit: bool = False


@dataclass(frozen=True)
class EnvState:
    """
    Символьное состояние стола.

    Инварианты: не более одного блока на земле в клетке, высота стопки
    не больше 2, удерживаемый блок находится в клетке захвата и ни на
    чём не стоит.
    """

    blocks: Tuple[Block, ...]
    button: Button
    gripper: Gripper
    background_style: str
    step_index: int = 0

    @property
    def zones(self) -> Dict[str, FrozenSet[Cell]]:
        return ZONES

    def block_index(self, color: str) -> Optional[int]:
        for i, block in enumerate(self.blocks):
            if block.color == color:
                return i
        return None

    def is_held(self, index: int) -> bool:
        return self.gripper.holding == index

    def ground_block_at(self, cell: Cell, exclude: Optional[int] = None) -> Optional[int]:
        for i, block in enumerate(self.blocks):
            if i == exclude or self.is_held(i):
                continue
            if block.cell == cell and block.stacked_on is None:
                return i
        return None

    def block_on(self, index: int) -> Optional[int]:
        for i, block in enumerate(self.blocks):
            if block.stacked_on == index and not self.is_held(i):
                return i
        return None

    def top_block_at(self, cell: Cell) -> Optional[int]:
        ground = self.ground_block_at(cell)
        if ground is None:
            return None
        above = self.block_on(ground)
        return above if above is not None else ground

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {"color": b.color, "cell": list(b.cell), "stacked_on": b.stacked_on}
                for b in self.blocks
            ],
            "button": {"cell": list(self.button.cell), "lit": self.button.lit},
            "gripper": {
                "cell": list(self.gripper.cell),
                "holding": self.gripper.holding,
                "closed": self.gripper.closed,
            },
            "background_style": self.background_style,
            "step_index": self.step_index,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EnvState":
        return cls(
            blocks=tuple(
                Block(b["color"], tuple(b["cell"]), b["stacked_on"]) for b in payload["blocks"]
            ),
            button=Button(tuple(payload["button"]["cell"]), bool(payload["button"]["lit"])),
            gripper=Gripper(
                tuple(payload["gripper"]["cell"]),
                payload["gripper"]["holding"],
                bool(payload["gripper"]["closed"]),
            ),
            background_style=payload["background_style"],
            step_index=int(payload["step_index"]),
        )


@dataclass(frozen=True)
class ActionCommand:
    """Смещение захвата (клетки за шаг, [-1, 1]) и состояние захвата: 0 - открыт, 1 - закрыт."""

    dx: float
    dy: float
    grip: int

    def __post_init__(self):
        if abs(self.dx) > 1.0 or abs(self.dy) > 1.0:
            raise ValueError(f"Смещение вне [-1, 1]: ({self.dx}, {self.dy})")
        if self.grip not in (0, 1):
            raise ValueError(f"grip должен быть 0 или 1, получено {self.grip}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.grip], dtype=np.float32)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    args: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"Неизвестный тип задачи: {self.kind}")

    @property
    def instruction(self) -> str:
        if self.kind == "move_block_to_zone":
            color, zone = self.args
            return f"move {color} block to {zone} zone"
        if self.kind == "press_button":
            return "press the button"
        if self.kind == "stack_block_on_block":
            source, target = self.args
            return f"stack {source} block on {target} block"
        return f"pick up {self.args[0]} block"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "args": list(self.args)}

    @classmethod
    def from_dict(cls, payload: dict) -> "TaskSpec":
        return cls(payload["kind"], tuple(payload["args"]))


@dataclass
class Frame:
    state: EnvState
    image: np.ndarray


@dataclass
class Trajectory:
    """
    Демонстрация одной задачи: кадры, действия (на одно меньше) и инструкция.
    """

    frames: List[Frame]
    actions: List[ActionCommand]
    task: TaskSpec
    scene_description: str
    seed: int = 0
    split: str = "train"

    @property
    def states(self) -> List[EnvState]:
        return [f.state for f in self.frames]

    @property
    def images(self) -> List[np.ndarray]:
        return [f.image for f in self.frames]


@dataclass
class VqaPair:
    image: np.ndarray
    question: str
    answer: str
    state: Optional[EnvState] = field(default=None, repr=False)


def _split_rng(seed: int, split: str, stream: int = 0) -> np.random.Generator:
    if split not in SPLITS:
        raise ValueError(f"Неизвестный сплит: {split}")
    return np.random.default_rng([int(seed), SPLITS.index(split), stream])


def reset(seed: int, split: str = "train") -> EnvState:
    """
    Детерминированное начальное состояние по (seed, split).

    Сплиты train/eval_seen используют фоны A-C и пять обучающих цветов,
    eval_unseen_bg - фон D, eval_unseen_color добавляет отложенный цвет.
    """
    rng = _split_rng(seed, split)
    if split == "eval_unseen_bg":
        background = "D"
    else:
        background = str(rng.choice(TRAIN_BACKGROUNDS))

    n_blocks = int(rng.integers(4, 6))
    if split == "eval_unseen_color":
        others = [str(c) for c in rng.choice(TRAIN_COLORS, size=n_blocks - 1, replace=False)]
        colors = [HELD_OUT_COLOR] + others
    else:
        colors = [str(c) for c in rng.choice(TRAIN_COLORS, size=n_blocks, replace=False)]

    zone_cells = LEFT_ZONE | RIGHT_ZONE
    free = [(x, y) for y in range(GRID) for x in range(GRID) if (x, y) not in zone_cells]
    order = rng.permutation(len(free))
    cells = [free[i] for i in order]
    button_cell = cells[0]
    block_cells = cells[1:1 + n_blocks]
    gripper_cell = cells[1 + n_blocks]

    blocks = tuple(Block(color, cell) for color, cell in zip(colors, block_cells))
    return EnvState(
        blocks=blocks,
        button=Button(button_cell),
        gripper=Gripper(gripper_cell),
        background_style=background,
        step_index=0,
    )


def _clip(value: int) -> int:
    return int(min(GRID - 1, max(0, value)))


def step(state: EnvState, action: ActionCommand) -> EnvState:
    """
    Динамика среды: сначала захват, затем перемещение.

    Закрытие над блоком поднимает верхний блок клетки, закрытие на кнопке
    без груза зажигает её; открытие опускает груз на пол или на свободный
    верх стоящего блока (на стопку высоты 2 - не опускает). Перемещение
    на (round(dx), round(dy)) с обрезкой по краю поля.
    """
    blocks = list(state.blocks)
    gripper = state.gripper
    button = state.button
    holding = gripper.holding
    closed = action.grip >= 1

    if closed:
        if holding is None:
            top = state.top_block_at(gripper.cell)
            if top is not None:
                holding = top
                blocks[top] = replace(blocks[top], stacked_on=None)
            elif button.cell == gripper.cell and not button.lit:
                button = replace(button, lit=True)
    elif holding is not None:
        ground = state.ground_block_at(gripper.cell, exclude=holding)
        if ground is None:
            blocks[holding] = replace(blocks[holding], cell=gripper.cell, stacked_on=None)
            holding = None
        elif state.block_on(ground) is None and state.ground_block_at(gripper.cell) == ground:
            blocks[holding] = replace(blocks[holding], cell=gripper.cell, stacked_on=ground)
            holding = None

    dx = int(np.clip(np.rint(action.dx), -1, 1))
    dy = int(np.clip(np.rint(action.dy), -1, 1))
    cell = (_clip(gripper.cell[0] + dx), _clip(gripper.cell[1] + dy))
    if holding is not None:
        blocks[holding] = replace(blocks[holding], cell=cell, stacked_on=None)

    return EnvState(
        blocks=tuple(blocks),
        button=button,
        gripper=Gripper(cell, holding, closed),
        background_style=state.background_style,
        step_index=state.step_index + 1,
    )


def render_codes(state: EnvState) -> np.ndarray:
    """
    Коды палитры клеток в растровом порядке, форма (8, 8) [y, x].

    Захват виден всегда: его клетка закрашивается кодом gripper_holding,
    если он несёт блок, иначе gripper_empty. Блок под захватом и сам
    удерживаемый блок в этой клетке не видны.
    """
    grid = np.full((GRID, GRID), PALETTE_CODE[f"background_{state.background_style}"], dtype=np.uint8)
    for cell in LEFT_ZONE:
        grid[cell[1], cell[0]] = PALETTE_CODE["zone_left"]
    for cell in RIGHT_ZONE:
        grid[cell[1], cell[0]] = PALETTE_CODE["zone_right"]
    bx, by = state.button.cell
    grid[by, bx] = PALETTE_CODE["button_lit" if state.button.lit else "button_off"]

    for i, block in enumerate(state.blocks):
        if state.is_held(i):
            continue
        top = state.top_block_at(block.cell)
        if top is not None:
            x, y = block.cell
            grid[y, x] = PALETTE_CODE[state.blocks[top].color]

    gx, gy = state.gripper.cell
    grid[gy, gx] = PALETTE_CODE["gripper_holding" if state.gripper.holding is not None else "gripper_empty"]
    return grid


def paint_codes(codes: np.ndarray) -> np.ndarray:
    """Изображение 32x32x3 из 64 кодов палитры (растровый порядок)."""
    grid = np.asarray(codes, dtype=np.int64).reshape(GRID, GRID)
    cells = PALETTE_RGB[grid]
    return np.repeat(np.repeat(cells, CELL_PX, axis=0), CELL_PX, axis=1)


def render(state: EnvState) -> np.ndarray:
    return paint_codes(render_codes(state))


# ----------------------------------------------------------------------
# Задачи и эксперт
# ----------------------------------------------------------------------

def success(state: EnvState, task: TaskSpec) -> bool:
    if task.kind == "press_button":
        return state.button.lit
    source = state.block_index(task.args[0])
    if source is None:
        return False
    block = state.blocks[source]
    if task.kind == "pick_block":
        return state.gripper.holding == source
    if state.is_held(source):
        return False
    if task.kind == "move_block_to_zone":
        return block.stacked_on is None and block.cell in ZONES[task.args[1]]
    target = state.block_index(task.args[1])
    return target is not None and block.stacked_on == target


def _toward(origin: Cell, target: Cell) -> Tuple[int, int]:
    # сначала по x, затем по y
    if origin[0] != target[0]:
        return (1 if target[0] > origin[0] else -1), 0
    if origin[1] != target[1]:
        return 0, (1 if target[1] > origin[1] else -1)
    return 0, 0


def _manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _zone_destination(state: EnvState, zone: str, source: int, origin: Cell) -> Cell:
    free = [
        cell for cell in sorted(ZONES[zone], key=lambda c: (c[1], c[0]))
        if state.ground_block_at(cell, exclude=source) is None
    ]
    if not free:
        raise InfeasibleTaskError(f"В зоне {zone} нет свободных клеток")
    return min(free, key=lambda c: _manhattan(origin, c))


def expert_action(state: EnvState, task: TaskSpec) -> ActionCommand:
    """
    Жадный эксперт по кратчайшему осевому пути.

    Raises:
        InfeasibleTaskError: задача невыполнима в данном состоянии
    """
    if success(state, task):
        return ActionCommand(0.0, 0.0, 1 if task.kind == "pick_block" else 0)

    gripper = state.gripper
    source = None
    if task.kind != "press_button":
        source = state.block_index(task.args[0])
        if source is None:
            raise InfeasibleTaskError(f"Нет блока цвета {task.args[0]}")
        if state.block_on(source) is not None and not state.is_held(source):
            raise InfeasibleTaskError(f"Блок {task.args[0]} накрыт другим блоком")

    if gripper.holding is not None and gripper.holding != source:
        return ActionCommand(0.0, 0.0, 0)

    if task.kind == "press_button":
        if gripper.cell == state.button.cell:
            return ActionCommand(0.0, 0.0, 1)
        dx, dy = _toward(gripper.cell, state.button.cell)
        return ActionCommand(float(dx), float(dy), 0)

    source_cell = state.blocks[source].cell
    if task.kind == "pick_block":
        if gripper.cell == source_cell:
            return ActionCommand(0.0, 0.0, 1)
        dx, dy = _toward(gripper.cell, source_cell)
        return ActionCommand(float(dx), float(dy), 0)

    if task.kind == "move_block_to_zone":
        destination = _zone_destination(state, task.args[1], source, gripper.cell)
    else:
        target = state.block_index(task.args[1])
        if target is None:
            raise InfeasibleTaskError(f"Нет блока цвета {task.args[1]}")
        if state.is_held(target) or state.blocks[target].stacked_on is not None:
            raise InfeasibleTaskError(f"Блок {task.args[1]} не стоит на столе")
        if state.block_on(target) is not None:
            raise InfeasibleTaskError(f"Блок {task.args[1]} уже накрыт")
        destination = state.blocks[target].cell

    if gripper.holding == source:
        if gripper.cell == destination:
            return ActionCommand(0.0, 0.0, 0)
        dx, dy = _toward(gripper.cell, destination)
        return ActionCommand(float(dx), float(dy), 1)

    if gripper.cell == source_cell:
        # захват и первый шаг к цели одним действием
        dx, dy = _toward(gripper.cell, destination)
        return ActionCommand(float(dx), float(dy), 1)
    dx, dy = _toward(gripper.cell, source_cell)
    return ActionCommand(float(dx), float(dy), 0)


def sample_chain(seed: int, k: int = 5, split: str = "train") -> List[TaskSpec]:
    """
    Цепочка из k совместимых задач для эпизода reset(seed, split).

    Задачи затрагивают непересекающиеся блоки, кнопка используется не
    более одного раза, pick_block - только последней задачей, в каждую
    зону - не более двух перемещений.
    """
    state = reset(seed, split)
    rng = _split_rng(seed, split, stream=1)

    order = [int(i) for i in rng.permutation(len(state.blocks))]
    held_out = state.block_index(HELD_OUT_COLOR)
    if held_out is not None:
        order.remove(held_out)
        order.insert(0, held_out)

    available = list(order)
    button_free = not state.button.lit
    zone_moves = {"left": 0, "right": 0}
    tasks: List[TaskSpec] = []

    for position in range(k):
        remaining_after = k - position - 1
        options = []
        cost = {"press_button": 0, "move_block_to_zone": 1, "pick_block": 1, "stack_block_on_block": 2}
        for kind in TASK_KINDS:
            if kind == "press_button" and not button_free:
                continue
            if kind == "pick_block" and remaining_after > 0:
                continue
            if kind == "move_block_to_zone" and min(zone_moves.values()) >= 2:
                continue
            blocks_left = len(available) - cost[kind]
            if blocks_left < 0:
                continue
            button_after = button_free and kind != "press_button"
            if blocks_left < remaining_after - (1 if button_after else 0):
                continue
            options.append(kind)
        if not options:
            raise InfeasibleTaskError(f"Невозможно собрать цепочку длины {k} для seed={seed}")

        kind = options[int(rng.integers(len(options)))]
        if kind == "press_button":
            button_free = False
            tasks.append(TaskSpec(kind))
        elif kind == "move_block_to_zone":
            zones = [z for z in ("left", "right") if zone_moves[z] < 2]
            zone = zones[int(rng.integers(len(zones)))]
            zone_moves[zone] += 1
            tasks.append(TaskSpec(kind, (state.blocks[available.pop(0)].color, zone)))
        elif kind == "stack_block_on_block":
            source = available.pop(0)
            target = available.pop(0)
            tasks.append(TaskSpec(kind, (state.blocks[source].color, state.blocks[target].color)))
        else:
            tasks.append(TaskSpec(kind, (state.blocks[available.pop(0)].color,)))
    return tasks


def run_expert(
    state: EnvState,
    task: TaskSpec,
    max_steps: int = 64,
) -> Trajectory:
    """
    Прогон эксперта до успеха; возвращает демонстрацию задачи.

    Raises:
        InfeasibleTaskError: эксперт не уложился в max_steps
    """
    frames = [Frame(state, render(state))]
    actions: List[ActionCommand] = []
    description = describe_scene(state)
    while not success(state, task):
        if len(actions) >= max_steps:
            raise InfeasibleTaskError(f"Эксперт не выполнил '{task.instruction}' за {max_steps} шагов")
        action = expert_action(state, task)
        state = step(state, action)
        actions.append(action)
        frames.append(Frame(state, render(state)))
    return Trajectory(frames, actions, task, description)


def run_expert_chain(
    seed: int,
    split: str = "train",
    k: int = 5,
    max_steps: int = 64,
) -> List[Trajectory]:
    """Демонстрации всех задач цепочки, каждая начинается там, где закончилась предыдущая."""
    state = reset(seed, split)
    trajectories = []
    for task in sample_chain(seed, k, split):
        trajectory = run_expert(state, task, max_steps)
        trajectory.seed = seed
        trajectory.split = split
        trajectories.append(trajectory)
        state = trajectory.frames[-1].state
    return trajectories


# ----------------------------------------------------------------------
# Описания и вопросы-ответы
# ----------------------------------------------------------------------

def _place_word(cell: Cell) -> str:
    if cell in LEFT_ZONE:
        return "leftzone"
    if cell in RIGHT_ZONE:
        return "rightzone"
    vertical = "up" if cell[1] < GRID // 2 else "down"
    horizontal = "left" if cell[0] < GRID // 2 else "right"
    return vertical + horizontal


def describe_scene(state: EnvState) -> str:
    """Шаблонное описание сцены (не длиннее 23 слов)."""
    parts = []
    for i in sorted(range(len(state.blocks)), key=lambda j: COLORS.index(state.blocks[j].color)):
        block = state.blocks[i]
        if state.is_held(i):
            parts.append(f"{block.color} held")
        elif block.stacked_on is not None:
            parts.append(f"{block.color} on {state.blocks[block.stacked_on].color}")
        else:
            parts.append(f"{block.color} {_place_word(block.cell)}")
    parts.append("button " + ("lit" if state.button.lit else "off"))
    return " , ".join(parts)


def _block_position(state: EnvState, index: int) -> Cell:
    if state.is_held(index):
        return state.gripper.cell
    return state.blocks[index].cell


def _zone_answer(state: EnvState, zone: str) -> str:
    for cell in sorted(ZONES[zone], key=lambda c: (c[1], c[0])):
        top = state.top_block_at(cell)
        if top is not None:
            return state.blocks[top].color
    return "none"


def make_vqa(state: EnvState, n: int, seed: int = 0) -> List[VqaPair]:
    """
    n пар вопрос-ответ по шаблонам; первая пара всегда - описание сцены.
    Цвета в вопросах берутся только из допустимых для сцены.
    """
    rng = np.random.default_rng([int(seed), 31337])
    image = render(state)
    present = [b.color for b in state.blocks]
    palette_colors = COLORS if HELD_OUT_COLOR in present else TRAIN_COLORS

    pairs = [VqaPair(image, DESCRIBE_PROMPT, describe_scene(state), state)]
    templates = ("exists", "zone", "holding", "relation", "at")
    while len(pairs) < n:
        template = templates[int(rng.integers(len(templates)))]
        if template == "exists":
            color = str(rng.choice(palette_colors))
            question = f"is there a {color} block ?"
            answer = "yes" if color in present else "no"
        elif template == "zone":
            zone = ("left", "right")[int(rng.integers(2))]
            question = f"what color is the block in the {zone} zone ?"
            answer = _zone_answer(state, zone)
        elif template == "holding":
            question = "what is the gripper holding ?"
            held = state.gripper.holding
            answer = state.blocks[held].color if held is not None else "nothing"
        elif template == "relation":
            if len(state.blocks) < 2:
                continue
            a, b = (int(i) for i in rng.choice(len(state.blocks), size=2, replace=False))
            relation = ("left of", "right of", "above", "below")[int(rng.integers(4))]
            pa, pb = _block_position(state, a), _block_position(state, b)
            truth = {
                "left of": pa[0] < pb[0],
                "right of": pa[0] > pb[0],
                "above": pa[1] < pb[1],
                "below": pa[1] > pb[1],
            }[relation]
            question = f"is the {state.blocks[a].color} block {relation} the {state.blocks[b].color} block ?"
            answer = "yes" if truth else "no"
        else:
            if rng.random() < 0.5:
                cell = _block_position(state, int(rng.integers(len(state.blocks))))
            else:
                cell = (int(rng.integers(GRID)), int(rng.integers(GRID)))
            question = f"what color is the block at row {NUMBER_WORDS[cell[1]]} column {NUMBER_WORDS[cell[0]]} ?"
            if state.gripper.holding is not None and state.gripper.cell == cell:
                answer = state.blocks[state.gripper.holding].color
            else:
                top = state.top_block_at(cell)
                answer = state.blocks[top].color if top is not None else "none"
        pairs.append(VqaPair(image, question, answer, state))
    return pairs[:n]


def advance_along_chain(seed: int, split: str, n_steps: int, k: int = 5) -> EnvState:
    """Состояние после n_steps действий эксперта по цепочке эпизода (для разнообразия VQA)."""
    state = reset(seed, split)
    chain = sample_chain(seed, k, split)
    task_index = 0
    for _ in range(n_steps):
        while task_index < len(chain) and success(state, chain[task_index]):
            task_index += 1
        if task_index >= len(chain):
            break
        state = step(state, expert_action(state, chain[task_index]))
    return state


def replay(initial: EnvState, actions: Sequence[ActionCommand]) -> List[EnvState]:
    states = [initial]
    for action in actions:
        states.append(step(states[-1], action))
    return states
