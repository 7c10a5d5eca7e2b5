# Empty __init__.py for modules package