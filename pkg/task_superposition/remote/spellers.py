"""number words for 0 .. 999 in english, french and spanish"""

from collections.abc import Callable

from ..errors import ContractError

_EN_SMALL = [
    'zero', 'one', 'two', 'three', 'four', 'five', 'six', 'seven', 'eight', 'nine', 'ten',
    'eleven', 'twelve', 'thirteen', 'fourteen', 'fifteen', 'sixteen', 'seventeen', 'eighteen', 'nineteen',
]
_EN_TENS = ['', '', 'twenty', 'thirty', 'forty', 'fifty', 'sixty', 'seventy', 'eighty', 'ninety']

_FR_SMALL = [
    'zéro', 'un', 'deux', 'trois', 'quatre', 'cinq', 'six', 'sept', 'huit', 'neuf', 'dix',
    'onze', 'douze', 'treize', 'quatorze', 'quinze', 'seize',
]
_FR_TENS = ['', 'dix', 'vingt', 'trente', 'quarante', 'cinquante', 'soixante']

_ES_SMALL = [
    'cero', 'uno', 'dos', 'tres', 'cuatro', 'cinco', 'seis', 'siete', 'ocho', 'nueve', 'diez',
    'once', 'doce', 'trece', 'catorce', 'quince', 'dieciséis', 'diecisiete', 'dieciocho', 'diecinueve',
    'veinte', 'veintiuno', 'veintidós', 'veintitrés', 'veinticuatro', 'veinticinco', 'veintiséis',
    'veintisiete', 'veintiocho', 'veintinueve',
]
_ES_TENS = ['', '', '', 'treinta', 'cuarenta', 'cincuenta', 'sesenta', 'setenta', 'ochenta', 'noventa']
_ES_HUNDREDS = [
    '', 'ciento', 'doscientos', 'trescientos', 'cuatrocientos', 'quinientos',
    'seiscientos', 'setecientos', 'ochocientos', 'novecientos',
]


def _check(n: int) -> None:
    if not 0 <= n <= 999:
        raise ContractError(f'numbers are spelled for 0..999 only, got {n}')


def english(n: int) -> str:
    _check(n)
    hundreds, rest = divmod(n, 100)
    words = []
    if hundreds:
        words.append(f'{_EN_SMALL[hundreds]} hundred')
    if rest or not hundreds:
        if rest < 20:
            words.append(_EN_SMALL[rest])
        else:
            tens, ones = divmod(rest, 10)
            words.append(_EN_TENS[tens] + (f'-{_EN_SMALL[ones]}' if ones else ''))
    return ' '.join(words)


def _french_below_100(n: int) -> str:
    if n <= 16:
        return _FR_SMALL[n]
    if n < 20:
        return f'dix-{_FR_SMALL[n - 10]}'
    if n < 70:
        tens, ones = divmod(n, 10)
        if ones == 0:
            return _FR_TENS[tens]
        if ones == 1:
            return f'{_FR_TENS[tens]} et un'
        return f'{_FR_TENS[tens]}-{_FR_SMALL[ones]}'
    if n < 80:
        if n == 71:
            return 'soixante et onze'
        return f'soixante-{_french_below_100(n - 60)}'
    if n == 80:
        return 'quatre-vingts'
    return f'quatre-vingt-{_french_below_100(n - 80)}'


def french(n: int) -> str:
    _check(n)
    hundreds, rest = divmod(n, 100)
    if not hundreds:
        return _french_below_100(rest)
    head = 'cent' if hundreds == 1 else f'{_FR_SMALL[hundreds]} cent'
    if rest == 0:
        return head if hundreds == 1 else head + 's'
    return f'{head} {_french_below_100(rest)}'


def spanish(n: int) -> str:
    _check(n)
    if n == 100:
        return 'cien'
    hundreds, rest = divmod(n, 100)
    words = [_ES_HUNDREDS[hundreds]] if hundreds else []
    if rest or not hundreds:
        if rest < 30:
            words.append(_ES_SMALL[rest])
        else:
            tens, ones = divmod(rest, 10)
            words.append(_ES_TENS[tens] + (f' y {_ES_SMALL[ones]}' if ones else ''))
    return ' '.join(words)


SPELLERS: dict[str, Callable[[int], str]] = {
    'en': english,
    'fr': french,
    'es': spanish,
}
